"""Entropic optimal transport on tensor grids with the quadratic cost.

All solvers work with dual potentials in cost units.  A kernel application
is ``log sum_i exp(v_i - c(x_i, y_j)/eps)``; on a tensor grid the cost splits
per axis, so this is done as one small contraction per axis.  The plain
backend exponentiates and multiplies by dense per-axis Gibbs matrices; the log
backend uses LogSumExp per axis and never underflows.

Discrete measures are quadrature masses ``rho_i * w_i``.  The OT value uses
the KL reference ``rho (x) sigma`` (product measure).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from .tensor_grid import (
    GridDensity,
    GridField,
    GridVectorField,
    TensorGrid,
    gradient,
)

log = logging.getLogger(__name__)

# exp(-x) underflows to zero in double precision around x = 745
_PLAIN_EXPONENT_LIMIT = 600.0


class SinkhornConvergenceError(RuntimeError):
    """Iteration budget exhausted; carries the last residual and state."""

    def __init__(self, message: str, residual: float, result: "SinkhornResult | None" = None):
        super().__init__(message)
        self.residual = residual
        self.result = result


class PlainDomainError(FloatingPointError):
    """The plain Gibbs kernel under/overflowed; rerun with ``log_domain=True``."""


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver settings.

    ``max_iter`` of ``None`` resolves to ``ceil(10/eps)``.  ``log_domain`` is
    forced on whenever the plain kernel would underflow on the grid.
    ``annealing`` starts at ``eps = 1`` and halves per stage; intermediate
    stages run at most ``stage_iter`` iterations.
    """

    epsilon: float
    tol: float = 1e-3
    max_iter: int | None = None
    log_domain: bool = False
    annealing: bool = True
    stage_iter: int = 10

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    @property
    def resolved_max_iter(self) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return int(math.ceil(10.0 / self.epsilon))

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "tol": self.tol, "max_iter": self.resolved_max_iter,
                "log_domain": self.log_domain, "annealing": self.annealing,
                "stage_iter": self.stage_iter}


@dataclass(frozen=True)
class SinkhornResult:
    psi_rho: GridField
    psi_sigma: GridField
    marginal_residual: float
    iterations: int
    ot_eps_value: float
    rho: GridDensity
    sigma: GridDensity
    epsilon: float
    log_domain: bool


@dataclass(frozen=True)
class DivergenceResult:
    value: float
    psi_rho_sigma: GridField
    psi_sigma_rho: GridField
    psi_rho_rho: GridField
    psi_sigma_sigma: GridField


# ---------------------------------------------------------------------------
# separable Gibbs kernel


def _axis_cost(grid: TensorGrid, k: int) -> NDArray[np.float64]:
    x = grid.axis(k)
    return 0.5 * (x[:, None] - x[None, :]) ** 2


def max_cost(grid: TensorGrid) -> float:
    return 0.5 * sum((b - a) ** 2 for a, b in grid.domain)


def needs_log_domain(grid: TensorGrid, eps: float) -> bool:
    return max_cost(grid) / eps > _PLAIN_EXPONENT_LIMIT


class GibbsOperator:
    """``v -> log K exp(v)`` for the Gibbs kernel ``exp(-c/eps)`` on a tensor grid.

    The kernel is symmetric, so the same operator serves both marginals.
    """

    def __init__(self, grid: TensorGrid, eps: float, log_domain: bool | None = None):
        self.grid = grid
        self.eps = float(eps)
        forced = needs_log_domain(grid, eps)
        self.log_domain = forced if log_domain is None else (log_domain or forced)
        costs = [_axis_cost(grid, k) / self.eps for k in range(grid.dim)]
        if self.log_domain:
            self._neg_cost = [-c for c in costs]
        else:
            self._kernels = [np.exp(-c) for c in costs]

    def apply(self, a: NDArray) -> NDArray:
        """Plain product ``K a``; only valid on the plain backend."""
        if self.log_domain:
            raise PlainDomainError("plain product requested from a log-domain operator")
        out = a
        for k, K in enumerate(self._kernels):
            out = np.moveaxis(np.tensordot(K, out, axes=([1], [k])), 0, k)
        return out

    def log_apply(self, v: NDArray) -> NDArray:
        """``log sum_i exp(v_i - c(x_i, y_j)/eps)`` for every node ``y_j``."""
        if self.log_domain:
            out = v
            for k, nc in enumerate(self._neg_cost):
                moved = np.moveaxis(out, k, 0)
                # (n_in, n_out, rest...) then reduce over the input axis
                expanded = nc.reshape(nc.shape + (1,) * (moved.ndim - 1)) + moved[:, None]
                out = np.moveaxis(logsumexp(expanded, axis=0), 0, k)
            return out
        finite = np.isfinite(v)
        if not finite.any():
            return np.full(v.shape, -np.inf)
        shift = np.max(v[finite])
        with np.errstate(under="ignore"):
            s = self.apply(np.exp(v - shift))
        if not np.all(s > 0) or not np.all(np.isfinite(s)):
            raise PlainDomainError(
                f"plain Gibbs kernel underflowed at eps={self.eps:g}; use log_domain=True")
        return np.log(s) + shift

    def softmin(self, h: NDArray, log_mass: NDArray) -> NDArray:
        """``-eps log sum_i exp((h_i - c_ij)/eps) mass_i``."""
        return -self.eps * self.log_apply(h / self.eps + log_mass)


def kernel_apply(a: GridField, eps: float, grid: TensorGrid | None = None,
                 log_domain: bool = False) -> GridField:
    """Dense-equivalent Gibbs product ``K a``, or ``log K exp(a)`` in the log domain."""
    grid = a.grid if grid is None else grid
    if grid != a.grid:
        raise ValueError("field and grid differ")
    if log_domain:
        op = GibbsOperator(grid, eps, log_domain=True)
        return GridField(grid, op.log_apply(a.values))
    op = GibbsOperator(grid, eps, log_domain=False)
    if op.log_domain:
        raise PlainDomainError(f"plain Gibbs kernel underflows at eps={eps:g}; use log_domain=True")
    return GridField(grid, op.apply(a.values))


def dense_kernel(grid: TensorGrid, eps: float) -> NDArray[np.float64]:
    """Full ``N x N`` Gibbs matrix in C-order node numbering (small grids only)."""
    p = grid.points()
    c = 0.5 * np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1)
    return np.exp(-c / eps)


def _log_mass(d: GridDensity) -> NDArray:
    with np.errstate(divide="ignore"):
        return np.log(d.masses())


def softmin_ctransform(psi: GridField, weights: GridDensity, eps: float,
                       log_domain: bool = True) -> GridField:
    """Entropic c-transform ``-eps LSE_i[(psi_i - c_ij)/eps + log m_i]``.

    ``m_i`` are the quadrature masses of ``weights``.
    """
    if psi.grid != weights.grid:
        raise ValueError("potential and weights must share a grid")
    if not np.any(weights.values > 0):
        raise ValueError("weights vanish everywhere")
    op = GibbsOperator(psi.grid, eps, log_domain=log_domain)
    return GridField(psi.grid, op.softmin(psi.values, _log_mass(weights)))


def hard_ctransform(psi: GridField, weights: GridDensity) -> GridField:
    """Brute-force ``min_i (c(x_i, y) - psi_i)`` over the support (small grids)."""
    p = psi.grid.points()
    c = 0.5 * np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1)
    supp = weights.flat() > 0
    vals = np.min(c[supp] - psi.flat()[supp][:, None], axis=0)
    return GridField(psi.grid, vals)


# ---------------------------------------------------------------------------
# Sinkhorn


def _eps_schedule(eps: float, annealing: bool) -> list[float]:
    if not annealing:
        return [eps]
    stages = []
    e = 1.0
    while e > eps:
        stages.append(e)
        e *= 0.5
    stages.append(eps)
    return stages


def _residual(mass: NDArray, g_old: NDArray, g_new: NDArray, eps: float) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        r = np.abs(1.0 - np.exp((g_old - g_new) / eps))
    r = np.where(mass > 0, r, 0.0)
    return float(np.sum(mass * r))


def _operator(grid: TensorGrid, eps: float, log_domain: bool,
              cache: dict | None) -> GibbsOperator:
    key = (eps, log_domain)
    if cache is not None and key in cache:
        return cache[key]
    op = GibbsOperator(grid, eps, log_domain=log_domain)
    if cache is not None:
        cache[key] = op
    return op


def _run_pair(alpha_log, beta_log, beta, f, stages, cfg, grid, cache, trace):
    """Alternating updates over the eps schedule.  Returns f, g, residual, iterations."""
    total = 0
    res = np.inf
    g = None
    for s, eps in enumerate(stages):
        final = s == len(stages) - 1
        budget = cfg.resolved_max_iter if final else cfg.stage_iter
        op = _operator(grid, eps, cfg.log_domain, cache)
        g = op.softmin(f, alpha_log)
        for _ in range(budget):
            f = op.softmin(g, beta_log)
            g_new = op.softmin(f, alpha_log)
            res = _residual(beta, g, g_new, eps)
            total += 1
            if trace is not None:
                trace(total, res, eps)
            if res <= cfg.tol:
                break
            g = g_new
        if final and res > cfg.tol:
            return f, g, res, total, False
    return f, g, res, total, True


def _run_symmetric(alpha_log, alpha, f, stages, cfg, grid, cache, trace):
    """Averaged fixed point ``f <- (f + softmin(f))/2`` for a density against itself."""
    total = 0
    res = np.inf
    for s, eps in enumerate(stages):
        final = s == len(stages) - 1
        budget = cfg.resolved_max_iter if final else cfg.stage_iter
        op = _operator(grid, eps, cfg.log_domain, cache)
        for _ in range(budget):
            t = op.softmin(f, alpha_log)
            res = _residual(alpha, f, t, eps)
            total += 1
            if trace is not None:
                trace(total, res, eps)
            if res <= cfg.tol:
                break
            f = 0.5 * (f + t)
        if final and res > cfg.tol:
            return f, res, total, False
    return f, res, total, True


def _gauge(f, g, alpha, beta):
    """Balanced gauge: both potentials carry half of the OT value."""
    kappa = 0.5 * (np.sum(f * alpha) - np.sum(g * beta))
    return f - kappa, g + kappa


def sinkhorn_solve(rho: GridDensity, sigma: GridDensity, cfg: SinkhornConfig,
                   init: NDArray | GridField | None = None,
                   trace: Callable[[int, float, float], None] | None = None,
                   _cache: dict | None = None) -> SinkhornResult:
    """Entropic OT between two grid densities.

    The returned pair satisfies the rho-marginal exactly and the sigma-marginal
    within ``cfg.tol`` in L1.  Identical inputs use the symmetric iteration and
    return equal potentials.  ``init`` warm-starts the rho-side potential.
    """
    if rho.grid != sigma.grid:
        raise ValueError("densities must share a grid")
    grid = rho.grid
    use_log = cfg.log_domain or needs_log_domain(grid, cfg.epsilon)
    if use_log != cfg.log_domain:
        cfg = replace(cfg, log_domain=True)
    alpha, beta = rho.masses(), sigma.masses()
    alpha_log, beta_log = _log_mass(rho), _log_mass(sigma)
    f0 = np.zeros(grid.shape)
    if init is not None:
        f0 = np.array(init.values if isinstance(init, GridField) else init, dtype=float)
        f0 = f0.reshape(grid.shape)
    stages = _eps_schedule(cfg.epsilon, cfg.annealing)
    cache = {} if _cache is None else _cache

    if np.array_equal(rho.values, sigma.values):
        f, res, it, ok = _run_symmetric(alpha_log, alpha, f0, stages, cfg, grid, cache, trace)
        g = f
    else:
        f, g, res, it, ok = _run_pair(alpha_log, beta_log, beta, f0, stages, cfg, grid, cache, trace)
        f, g = _gauge(f, g, alpha, beta)
    value = float(np.sum(f * alpha) + np.sum(g * beta))
    result = SinkhornResult(
        psi_rho=GridField(grid, f), psi_sigma=GridField(grid, g), marginal_residual=res,
        iterations=it, ot_eps_value=value, rho=rho, sigma=sigma, epsilon=cfg.epsilon,
        log_domain=cfg.log_domain)
    if not ok:
        raise SinkhornConvergenceError(
            f"Sinkhorn did not reach tol={cfg.tol:g} in {cfg.resolved_max_iter} iterations "
            f"(residual {res:.3e})", res, result)
    return result


def self_potential(rho: GridDensity, cfg: SinkhornConfig, **kw) -> SinkhornResult:
    """Symmetric solution of ``OT_eps(rho, rho)``."""
    return sinkhorn_solve(rho, rho, cfg, **kw)


def sinkhorn_divergence(rho: GridDensity, sigma: GridDensity,
                        cfg: SinkhornConfig) -> DivergenceResult:
    """``OT(rho, sigma) - OT(rho, rho)/2 - OT(sigma, sigma)/2`` via its four potentials."""
    cross = sinkhorn_solve(rho, sigma, cfg)
    if np.array_equal(rho.values, sigma.values):
        p_rho = p_sigma = cross.psi_rho
    else:
        p_rho = self_potential(rho, cfg).psi_rho
        p_sigma = self_potential(sigma, cfg).psi_rho
    value = (np.sum((cross.psi_rho.values - p_rho.values) * rho.masses())
             + np.sum((cross.psi_sigma.values - p_sigma.values) * sigma.masses()))
    return DivergenceResult(float(value), cross.psi_rho, cross.psi_sigma, p_rho, p_sigma)


def entropic_monge_map(result: SinkhornResult, direction: str = "forward",
                       debias_correction: GridField | None = None) -> GridVectorField:
    """``T(y) = y - grad psi(y)`` (+ ``grad psi_self(y)`` when debiased).

    ``forward`` maps rho onto sigma using the rho-side potential; ``backward``
    maps sigma onto rho.
    """
    if direction == "forward":
        psi = result.psi_rho
    elif direction == "backward":
        psi = result.psi_sigma
    else:
        raise ValueError("direction must be 'forward' or 'backward'")
    if debias_correction is not None:
        psi = psi - debias_correction
    grid = psi.grid
    disp = gradient(psi).as_array()
    coords = np.stack(grid.mesh())
    return GridVectorField.from_array(grid, coords - disp)


def eval_plan_density(result: SinkhornResult, x, y) -> NDArray[np.float64] | float:
    """Plan density at node pairs, w.r.t. Lebesgue measure on both factors.

    ``x`` and ``y`` are flat C-order node indices (scalars or equal-length arrays).
    """
    grid = result.rho.grid
    xi = np.asarray(x)
    yi = np.asarray(y)
    p = grid.points()
    c = 0.5 * np.sum((p[xi] - p[yi]) ** 2, axis=-1)
    f = result.psi_rho.flat()[xi]
    g = result.psi_sigma.flat()[yi]
    out = (result.rho.flat()[xi] * result.sigma.flat()[yi]
           * np.exp((f + g - c) / result.epsilon))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# barycenters


@dataclass
class BarycenterInfo:
    iterations: int
    change: float
    reference: str
    debias: bool
    history: list[float] = field(default_factory=list)
    converged: bool = False


def entropic_barycenter(densities: Sequence[GridDensity], weights: Sequence[float],
                        eps: float, debias: bool = True, reference: str = "product",
                        tol: float = 1e-6, max_iter: int = 20000,
                        log_domain: bool | None = None,
                        return_info: bool = False, strict: bool = True):
    """Fixed point of the iterative Bregman barycenter scheme.

    ``reference`` selects the KL reference of the biased functional:
    ``"product"`` (shrinks, Gaussian variance ``var - eps``) or
    ``"lebesgue"`` (blurs, ``var + eps``).  With ``debias`` the self-transport
    correction removes the bias and ``reference`` is ignored.  Iterates until
    the L1 change of the barycenter is at most ``tol``.  Without ``strict``
    the last iterate is returned after ``max_iter`` with ``info.converged``
    false instead of raising.
    """
    if not densities:
        raise ValueError("need at least one density")
    grid = densities[0].grid
    for d in densities:
        if d.grid != grid:
            raise ValueError("densities must share a grid")
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(densities),) or np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
        raise ValueError("weights must be a probability vector matching the densities")
    if reference not in ("product", "lebesgue"):
        raise ValueError("reference must be 'product' or 'lebesgue'")

    op = GibbsOperator(grid, eps, log_domain=log_domain)
    qw = grid.weights()
    log_qw = np.log(qw)

    def LK(v):
        return op.log_apply(v + log_qw)

    with np.errstate(divide="ignore"):
        log_alpha = [np.log(d.values) for d in densities]
    K = len(densities)
    log_b = [np.zeros(grid.shape) for _ in range(K)]
    log_beta = np.full(grid.shape, -np.log(np.sum(qw)))
    log_d = np.zeros(grid.shape)
    beta = np.exp(log_beta)
    info = BarycenterInfo(0, np.inf, reference, debias)
    for it in range(1, max_iter + 1):
        log_kta = []
        for k in range(K):
            la = log_alpha[k] - LK(log_b[k])
            log_kta.append(LK(la))
        acc = sum(wk * lk for wk, lk in zip(w, log_kta) if wk > 0)
        if debias:
            new_log_beta = log_d + acc
        elif reference == "product":
            new_log_beta = log_beta + acc
        else:
            new_log_beta = acc
        if not debias and reference == "product":
            new_log_beta = new_log_beta - logsumexp(new_log_beta + log_qw)
        log_b = [new_log_beta - lk for lk in log_kta]
        if debias:
            log_d = 0.5 * (log_d + new_log_beta - LK(log_d))
        new_beta = np.exp(new_log_beta)
        change = float(np.sum(np.abs(new_beta - beta) * qw))
        log_beta, beta = new_log_beta, new_beta
        info.history.append(change)
        info.iterations, info.change = it, change
        if change <= tol:
            info.converged = True
            break
    else:
        if not strict:
            log.warning("barycenter stopped at max_iter=%d with change %.3e", max_iter, change)
        else:
            raise SinkhornConvergenceError(
                f"barycenter did not converge in {max_iter} iterations (change {change:.3e})",
                change, info)
    out = GridDensity(grid, beta / np.sum(beta * qw))
    return (out, info) if return_info else out


def gaussian_moments(d: GridDensity) -> tuple[float, float]:
    """Mean and variance of a 1D grid density by quadrature."""
    x = d.grid.axis(0)
    m = d.masses()
    mean = float(np.sum(x * m))
    return mean, float(np.sum((x - mean) ** 2 * m))
