"""Model problems: Poisson with a moving Gaussian source, nonlinear advection-diffusion,
and a synthetic translated-Gaussian family with no PDE behind it."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from .fem import FemSpace, SparseSystem, solve_spd

log = logging.getLogger(__name__)


class NewtonError(RuntimeError):
    pass


def gaussian_2d(x: NDArray, y: NDArray, center, var: float) -> NDArray:
    """Normalized isotropic Gaussian density."""
    r2 = (x - center[0]) ** 2 + (y - center[1]) ** 2
    return np.exp(-r2 / (2.0 * var)) / (2.0 * np.pi * var)


@dataclass(frozen=True)
class PoissonProblem:
    """``-Laplace u = f_mu`` on the unit square, ``u = 0`` on the boundary.

    ``f_mu`` is a Gaussian of variance ``var`` centred at ``(1/2, 1/2) + mu``.
    """

    var: float = 1e-3
    box: tuple[float, float] = (-0.35, 0.35)

    def center(self, mu) -> NDArray:
        return 0.5 + np.asarray(mu, dtype=float)

    def source(self, mu, x: NDArray, y: NDArray) -> NDArray:
        return gaussian_2d(x, y, self.center(mu), self.var)

    def sample_parameters(self, n: int, rng: np.random.Generator) -> NDArray:
        lo, hi = self.box
        return rng.uniform(lo, hi, size=(n, 2))

    def system(self, space: FemSpace, mu) -> SparseSystem:
        f = self.source(mu, space.qp[:, 0], space.qp[:, 1])
        return SparseSystem(space.restrict(space.stiffness()), space.load(f)[space.free_idx], space)

    def solve(self, space: FemSpace, mu, stiffness: sp.spmatrix | None = None) -> NDArray:
        A = space.restrict(space.stiffness()) if stiffness is None else stiffness
        f = self.source(mu, space.qp[:, 0], space.qp[:, 1])
        return space.extend(solve_spd(A, space.load(f)[space.free_idx]))

    def to_dict(self) -> dict:
        return {"name": "poisson", "var": self.var, "box": list(self.box)}


@dataclass(frozen=True)
class AdvectionProblem:
    """``u_t + a(alpha) . grad(u + gamma u^2) = beta Laplace u`` with ``a = (cos, sin)/5``."""

    gamma: float = 1e-2
    beta: float = 1e-3
    dt: float = 5e-2
    var0: float = 5e-3
    center0: tuple[float, float] = (0.5, 0.5)
    speed: float = 0.2
    t_train: float = 0.8
    horizon: float = 1.0

    def velocity(self, alpha: float) -> NDArray:
        return self.speed * np.array([np.cos(alpha), np.sin(alpha)])

    def initial(self, x: NDArray, y: NDArray) -> NDArray:
        return gaussian_2d(x, y, self.center0, self.var0)

    def n_steps(self, T: float) -> int:
        return int(round(T / self.dt))

    def to_dict(self) -> dict:
        return {"name": "advection", "gamma": self.gamma, "beta": self.beta, "dt": self.dt,
                "var0": self.var0, "center0": list(self.center0), "speed": self.speed,
                "t_train": self.t_train, "horizon": self.horizon}


@dataclass(frozen=True)
class ShiftProblem:
    """Gaussian bump of variance ``var`` centred at ``(1/2 + mu, 1/2)``; pure translation."""

    var: float = 5e-3
    box: tuple[float, float] = (-0.2, 0.2)

    def field(self, mu, x: NDArray, y: NDArray) -> NDArray:
        return gaussian_2d(x, y, (0.5 + float(np.ravel(mu)[0]), 0.5), self.var)

    def sample_parameters(self, n: int) -> NDArray:
        return np.linspace(*self.box, n)[:, None]

    def to_dict(self) -> dict:
        return {"name": "shift", "var": self.var, "box": list(self.box)}


def midpoint_newton(residual: Callable[[NDArray], NDArray],
                    jacobian: Callable[[NDArray], object],
                    u0: NDArray, scale: float, tol: float = 1e-10, max_iter: int = 25,
                    picard: Callable[[NDArray], object] | None = None,
                    solve: Callable[[object, NDArray], NDArray] | None = None) -> tuple[NDArray, int]:
    """Newton on ``residual(u) = 0`` with a two-halving line search.

    After two failed line searches the iteration switches to ``picard`` (a
    frozen-coefficient Jacobian) when one is given.  Converged when
    ``||residual|| <= tol * scale``.
    """
    if solve is None:
        solve = lambda J, r: spla.spsolve(sp.csc_matrix(J), r) if sp.issparse(J) else np.linalg.solve(J, r)
    u = u0.copy()
    r = residual(u)
    rn = np.linalg.norm(r)
    thresh = tol * max(scale, 1e-300)
    failed_searches = 0
    for it in range(1, max_iter + 1):
        if rn <= thresh:
            return u, it - 1
        use_picard = picard is not None and failed_searches >= 2
        J = picard(u) if use_picard else jacobian(u)
        du = solve(J, -r)
        step = 1.0
        for _ in range(3):
            cand = u + step * du
            rc = residual(cand)
            rcn = np.linalg.norm(rc)
            if rcn < rn or rcn <= thresh:
                break
            step *= 0.5
        else:
            failed_searches += 1
        u, r, rn = cand, rc, rcn
    if rn <= thresh:
        return u, max_iter
    raise NewtonError(f"Newton did not converge in {max_iter} iterations (residual {rn:.3e})")


class AdvectionOperator:
    """High-fidelity midpoint stepping for ``AdvectionProblem`` on a ``FemSpace``."""

    def __init__(self, problem: AdvectionProblem, space: FemSpace):
        self.problem = problem
        self.space = space
        self.M = space.mass()
        self.S = space.stiffness()
        f = space.free_idx
        self.Mf = self.M[f][:, f].tocsc()
        self.Sf = self.S[f][:, f].tocsc()

    def flux(self, v: NDArray, a: NDArray) -> NDArray:
        """``int phi_i a . grad(v + gamma v^2)``."""
        sp_ = self.space
        vq = sp_.values_at_qp(v)
        gq = sp_.gradients_at_qp(v)
        integrand = (gq @ a) * (1.0 + 2.0 * self.problem.gamma * vq)
        return sp_.P.T @ (sp_.qw * integrand)

    def flux_jacobian(self, v: NDArray, a: NDArray, frozen: bool = False) -> sp.csr_matrix:
        sp_ = self.space
        vq = sp_.values_at_qp(v)
        J = sp_.advection(np.outer(1.0 + 2.0 * self.problem.gamma * vq, a))
        if not frozen:
            gq = sp_.gradients_at_qp(v)
            J = J + sp_.mass(2.0 * self.problem.gamma * (gq @ a))
        return J

    def step(self, u_n: NDArray, alpha: float, dt: float | None = None,
             tol: float = 1e-10) -> NDArray:
        """One implicit-midpoint step (Dirichlet nodes held at zero when the space has them)."""
        dt = self.problem.dt if dt is None else dt
        a = self.problem.velocity(alpha)
        sp_ = self.space
        f = sp_.free_idx
        beta = self.problem.beta
        un_f = u_n[f]

        def full(uf):
            return sp_.extend(uf) if sp_.dirichlet else uf

        def residual(uf):
            um = 0.5 * (full(uf) + u_n)
            return (self.Mf @ (uf - un_f)) / dt + self.flux(um, a)[f] + beta * (self.S @ um)[f]

        def jac(uf, frozen=False):
            um = 0.5 * (full(uf) + u_n)
            Jn = self.flux_jacobian(um, a, frozen)[f][:, f]
            return (self.Mf / dt + 0.5 * Jn + 0.5 * beta * self.Sf).tocsc()

        scale = np.linalg.norm(self.Mf @ un_f) / dt
        uf, _ = midpoint_newton(residual, jac, un_f, scale, tol=tol,
                                picard=lambda uf: jac(uf, True))
        return full(uf)

    def trajectory(self, alpha: float, T: float) -> NDArray:
        """Nodal states at ``t = 0, dt, ..., T`` as rows."""
        p = self.space.grid.points()
        u = self.problem.initial(p[:, 0], p[:, 1])
        if self.space.dirichlet:
            u[self.space.boundary] = 0.0
        out = [u]
        for _ in range(self.problem.n_steps(T)):
            u = self.step(u, alpha)
            out.append(u)
        return np.array(out)


def implicit_midpoint_step(problem: AdvectionProblem, space: FemSpace, u_n: NDArray,
                           alpha: float, dt: float | None = None) -> NDArray:
    return AdvectionOperator(problem, space).step(u_n, alpha, dt)


@dataclass
class SnapshotSet:
    """Nodal snapshots as rows with their parameters.

    ``params`` rows are ``mu`` for Poisson and ``(t, alpha)`` for advection.
    """

    params: NDArray
    values: NDArray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.values)


def poisson_sweep(problem: PoissonProblem, space: FemSpace, params: NDArray) -> SnapshotSet:
    A = space.restrict(space.stiffness())
    vals = np.array([problem.solve(space, mu, A) for mu in np.atleast_2d(params)])
    return SnapshotSet(np.atleast_2d(params), vals, {"problem": problem.to_dict()})


def advection_sweep(problem: AdvectionProblem, space: FemSpace, alphas, T: float) -> SnapshotSet:
    op = AdvectionOperator(problem, space)
    params, vals = [], []
    for alpha in np.atleast_1d(alphas):
        traj = op.trajectory(float(alpha), T)
        for k, u in enumerate(traj):
            params.append((k * problem.dt, float(alpha)))
            vals.append(u)
    return SnapshotSet(np.array(params), np.array(vals), {"problem": problem.to_dict()})


def shift_sweep(problem: ShiftProblem, space: FemSpace, params: NDArray) -> SnapshotSet:
    p = space.grid.points()
    vals = np.array([problem.field(mu, p[:, 0], p[:, 1]) for mu in np.atleast_2d(params)])
    vals[:, space.boundary] = 0.0
    return SnapshotSet(np.atleast_2d(params), vals, {"problem": problem.to_dict()})


def snapshot_sweep(problem, space: FemSpace, samples, T: float | None = None) -> SnapshotSet:
    """Dispatch on the problem type; ``samples`` are ``mu`` rows or ``alpha`` values."""
    if isinstance(problem, ShiftProblem):
        return shift_sweep(problem, space, samples)
    if isinstance(problem, PoissonProblem):
        return poisson_sweep(problem, space, samples)
    if isinstance(problem, AdvectionProblem):
        return advection_sweep(problem, space, samples, problem.t_train if T is None else T)
    raise TypeError(f"unsupported problem {type(problem).__name__}")
