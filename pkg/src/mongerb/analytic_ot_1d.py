"""Exact one-dimensional optimal transport and the boundary-layer family.

In 1D the quadratic-cost Monge map is the monotone rearrangement
``T = F_sigma^[-1] o F_rho``.  The boundary-layer family
``u_mu(x) = cosh(mu (1 - x)) / cosh(mu)`` has closed-form densities, cdfs and
maps; all of them are evaluated in exponent-shifted form so that
``mu`` up to several hundred does not overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .tensor_grid import GridDensity, GridField, GridVectorField, TensorGrid, make_uniform_grid

_LOG2 = np.log(2.0)


@dataclass(frozen=True)
class Cdf1D:
    grid: TensorGrid
    values: NDArray[np.float64]


def cdf_1d(rho: GridDensity) -> Cdf1D:
    """Running trapezoidal integral of a 1D density, clamped to [0, 1]."""
    if rho.grid.dim != 1:
        raise ValueError("cdf_1d needs a 1D density")
    h = rho.grid.spacing[0]
    v = rho.values
    inc = 0.5 * h * (v[1:] + v[:-1])
    F = np.concatenate([[0.0], np.cumsum(inc)])
    if F[-1] > 0:
        # remove the round-off in the total so the last value is exactly 1
        F = F / F[-1]
    F = np.clip(F, 0.0, 1.0)
    F = np.maximum.accumulate(F)
    F.setflags(write=False)
    return Cdf1D(rho.grid, F)


def pseudo_inverse_cdf(F: Cdf1D, p: ArrayLike) -> NDArray[np.float64] | float:
    """Generalized inverse ``inf{x : F(x) >= p}``, linear between bracketing nodes."""
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr < 0) | (p_arr > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    x = F.grid.axis(0)
    vals = F.values
    k = np.searchsorted(vals, p_arr, side="left")
    k = np.minimum(k, len(vals) - 1)
    km = np.maximum(k - 1, 0)
    lo, hi = vals[km], vals[k]
    denom = np.where(hi > lo, hi - lo, 1.0)
    t = np.where(hi > lo, (p_arr - lo) / denom, 1.0)
    out = np.where(k == 0, x[0], x[km] + t * (x[k] - x[km]))
    return float(out) if np.ndim(out) == 0 else out


def transport_map_1d(rho: GridDensity, sigma: GridDensity) -> GridVectorField:
    """Monotone rearrangement of ``rho`` onto ``sigma`` sampled at the nodes."""
    if rho.grid != sigma.grid:
        raise ValueError("densities must share a grid")
    T = pseudo_inverse_cdf(cdf_1d(sigma), cdf_1d(rho).values)
    return GridVectorField(rho.grid, (GridField(rho.grid, T),))


# ---------------------------------------------------------------------------
# boundary-layer family


def _log_sinh(x: NDArray) -> NDArray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < 1.0
    with np.errstate(divide="ignore"):
        out[small] = np.log(np.sinh(x[small]))
    xl = x[~small]
    out[~small] = xl + np.log1p(-np.exp(-2.0 * xl)) - _LOG2
    return out


def _asinh_from_log(logz: NDArray) -> NDArray:
    """``asinh(exp(logz))`` without forming ``exp(logz)`` for large arguments."""
    logz = np.asarray(logz, dtype=float)
    out = np.empty_like(logz)
    big = logz > 0.0
    out[big] = logz[big] + np.log1p(np.sqrt(1.0 + np.exp(-2.0 * logz[big])))
    out[~big] = np.arcsinh(np.exp(logz[~big]))
    return out


def boundary_layer_solution(mu: float, x: ArrayLike) -> NDArray[np.float64]:
    """``cosh(mu (1 - x)) / cosh(mu)``.

    Exactly 1 at x=0.  At x=1 the value is ``1/cosh(mu)`` (zero slope there),
    which is the term the exact-transport error bound is built from.
    """
    x = np.asarray(x, dtype=float)
    e2 = np.exp(-2.0 * mu)
    return (np.exp(-mu * x) + np.exp(-mu * (2.0 - x))) / (1.0 + e2)


def boundary_layer_density(mu: float, x: ArrayLike) -> NDArray[np.float64]:
    """Normalized ``u_mu``: ``mu cosh(mu (1 - x)) / sinh(mu)``."""
    x = np.asarray(x, dtype=float)
    return mu * (np.exp(-mu * x) + np.exp(-mu * (2.0 - x))) / (-np.expm1(-2.0 * mu))


def boundary_layer_cdf(mu: float, x: ArrayLike) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=float)
    return 1.0 - (np.exp(-mu * x) - np.exp(-mu * (2.0 - x))) / (-np.expm1(-2.0 * mu))


def boundary_layer_inverse_cdf(mu: float, p: ArrayLike) -> NDArray[np.float64]:
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        logz = np.log1p(-p) + _log_sinh(np.array(mu))
    return 1.0 - _asinh_from_log(logz) / mu


def boundary_layer_map(mu_bar: float, mu: float, y: ArrayLike) -> NDArray[np.float64]:
    """Closed-form monotone map pushing ``rho_{mu_bar}`` onto ``rho_mu``."""
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore"):
        logz = (_log_sinh(np.array(mu)) - _log_sinh(np.array(mu_bar))
                + _log_sinh(mu_bar * (1.0 - y)))
    return 1.0 - _asinh_from_log(logz) / mu


def logarithmic_mean(mu_min: float, mu_max: float) -> float:
    if not 0 < mu_min < mu_max:
        raise ValueError("need 0 < mu_min < mu_max")
    return (mu_max - mu_min) / (np.log(mu_max) - np.log(mu_min))


@dataclass(frozen=True)
class BoundaryLayerFamily:
    """Parameter range ``[mu_min, mu_min / ratio**2]`` of the boundary-layer problem.

    ``ratio`` is the width parameter in (0, 1); ``floor`` the uniform density
    floor mixed into ``rho(u)``.
    """

    mu_min: float
    ratio: float
    floor: float = 0.0

    def __post_init__(self) -> None:
        if not self.mu_min > 1:
            raise ValueError("mu_min must exceed 1")
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        if self.floor < 0:
            raise ValueError("floor must be nonnegative")

    @property
    def mu_max(self) -> float:
        return self.mu_min / self.ratio**2

    @property
    def mu_bar(self) -> float:
        return logarithmic_mean(self.mu_min, self.mu_max)

    def samples(self, n: int = 50) -> NDArray[np.float64]:
        return np.geomspace(self.mu_min, self.mu_max, n)

    def density(self, mu: float, grid: TensorGrid) -> GridDensity:
        from .tensor_grid import normalize_density

        x = grid.axis(0)
        v = boundary_layer_density(mu, x)
        return normalize_density(GridField(grid, v), floor=self.floor)

    def one_mode_weight(self, mu: ArrayLike) -> NDArray[np.float64]:
        """``w(mu) = -c(mu)/c(mu_min)`` with ``c(mu) = (mu_bar - mu)/mu``."""
        mu = np.asarray(mu, dtype=float)
        mb = self.mu_bar
        return -((mb - mu) / mu) / ((mb - self.mu_min) / self.mu_min)

    def exact_bound(self, mu: float) -> float:
        return abs(1.0 / np.cosh(mu) - 1.0 / np.cosh(self.mu_bar))

    def one_mode_bound(self) -> float:
        return float(np.exp(-self.mu_min) * (4.0 + self.ratio))


def _l2(values: NDArray, grid: TensorGrid) -> float:
    return float(np.sqrt(np.sum(values**2 * grid.weights())))


def exact_transport_errors(family: BoundaryLayerFamily, n_mu: int = 50,
                           n_nodes: int = 4097) -> tuple[NDArray, NDArray]:
    """L2 errors of ``u_mu_bar - u_mu o T`` with the exact maps, and their bounds."""
    if family.floor != 0:
        raise ValueError("closed-form maps require floor 0")
    grid = make_uniform_grid(1, n_nodes)
    y = grid.axis(0)
    mb = family.mu_bar
    ub = boundary_layer_solution(mb, y)
    mus = family.samples(n_mu)
    errs = np.array([
        _l2(ub - boundary_layer_solution(mu, boundary_layer_map(mb, mu, y)), grid)
        for mu in mus
    ])
    bounds = np.array([family.exact_bound(mu) for mu in mus])
    return errs, bounds


def one_mode_errors(family: BoundaryLayerFamily, n_mu: int = 50,
                    n_nodes: int = 4097) -> NDArray:
    """L2 errors of the single-mode registration ``y - w(mu) (T_min(y) - y)``."""
    if family.floor != 0:
        raise ValueError("closed-form maps require floor 0")
    grid = make_uniform_grid(1, n_nodes)
    y = grid.axis(0)
    mb = family.mu_bar
    ub = boundary_layer_solution(mb, y)
    mode_grad = boundary_layer_map(mb, family.mu_min, y) - y
    mus = family.samples(n_mu)
    w = family.one_mode_weight(mus)
    return np.array([
        _l2(ub - boundary_layer_solution(mu, y - wk * mode_grad), grid)
        for mu, wk in zip(mus, w)
    ])
