"""Offline training and online evaluation of the registered reduced model.

Offline: high-fidelity snapshots, densities on the transport grid, reference
barycenter, Monge-embedding potentials, boundary projection, transport modes,
mapped snapshots, reference reduced basis, GP coefficient maps and EIM.
Online: GP coefficients, mapping at quadrature (or EIM) points, Galerkin
solve in the reference domain and optional remap to the physical domain.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .eim import EimBasis, eim_coefficients, eim_from_snapshots
from .entropic_ot import (
    SinkhornConfig,
    SinkhornConvergenceError,
    entropic_barycenter,
    self_potential,
    sinkhorn_solve,
)
from .gp_regression import GpModel, gp_fit, gp_predict
from .pde.fem import FemSpace
from .pde.mapped import MappingError, laplace_coefficient
from .pde.problems import (
    AdvectionOperator,
    AdvectionProblem,
    PoissonProblem,
    ShiftProblem,
    SnapshotSet,
    advection_sweep,
    midpoint_newton,
    poisson_sweep,
    shift_sweep,
)
from .pod import correlation_matrix, pod_from_correlation, symmetric_eigendecomposition
from .registration import (
    BoundaryProjector,
    MongeEmbeddingSet,
    PointMapper,
    ProjectionConfig,
    TransportModes,
    build_transport_modes,
    embedding_correlation,
    invert_map,
)
from .tensor_grid import (
    GridDensity,
    GridField,
    TensorGrid,
    interpolation_matrix,
    make_uniform_grid,
    normalize_density,
)

log = logging.getLogger(__name__)

ARTIFACT_VERSION = 1


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class ArtifactVersionError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineOptions:
    """Everything that determines a training run.

    ``density`` is ``"u2"`` (``u^2`` normalized), ``"f"`` (the Poisson
    source) or ``"u"`` (the solution itself).  ``debias`` of ``None`` turns
    debiasing on only for ``"u2"``.  ``tau_eim`` of ``None`` is ``tau/10``
    for Poisson and ``tau`` for advection.  ``eim_samples`` extra Poisson
    parameters (default ``10 n_s``) feed the EIM training through the GP;
    they need no high-fidelity solves.
    """

    problem: str = "poisson"
    density: str = "u2"
    epsilon: float = 1e-2
    tau: float = 1e-4
    tau_eim: float | None = None
    floor: float = 0.0
    debias: bool | None = None
    pde_cells: int = 32
    ot_factor: int = 3
    n_s: int = 100
    n_alpha: int = 10
    seed: int = 0
    penalty: float = 1e-9
    length_scale: float | None = None
    eps_fine: float | None = None
    registration: bool = True
    max_modes: int | None = None
    max_basis: int | None = None
    eim: bool = True
    eim_max_terms: int | None = None
    eim_normalize: bool = True
    sinkhorn_tol: float = 1e-3
    barycenter_tol: float = 1e-6
    barycenter_max_iter: int = 2000
    eim_samples: int | None = None
    eig_method: str = "auto"

    def __post_init__(self) -> None:
        if self.problem not in ("poisson", "advection", "shift"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.density not in ("u2", "f", "u"):
            raise ValueError(f"unknown density choice {self.density!r}")
        if self.density == "f" and self.problem != "poisson":
            raise ValueError("density 'f' needs the Poisson problem")
        if not 0 < self.tau < 1 or not self.epsilon > 0:
            raise ValueError("tau must lie in (0, 1) and epsilon must be positive")
        if not 0 <= self.floor < 1:
            raise ValueError("floor must lie in [0, 1)")
        if self.n_s < 1 or self.pde_cells < 2 or self.ot_factor < 1:
            raise ValueError("n_s, pde_cells and ot_factor must be positive")

    @property
    def resolved_debias(self) -> bool:
        return self.density == "u2" if self.debias is None else bool(self.debias)

    @property
    def resolved_tau_eim(self) -> float:
        if self.tau_eim is not None:
            return self.tau_eim
        return self.tau / 10.0 if self.problem == "poisson" else self.tau

    @property
    def resolved_length_scale(self) -> float:
        return math.sqrt(self.epsilon) if self.length_scale is None else self.length_scale

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(resolved_debias=self.resolved_debias, resolved_tau_eim=self.resolved_tau_eim,
                 resolved_length_scale=self.resolved_length_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineOptions":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def make_problem(self):
        return {"poisson": PoissonProblem, "advection": AdvectionProblem, "shift": ShiftProblem}[self.problem]()


# ---------------------------------------------------------------------------
# quadrature-level reduced operators


class ReducedSpace:
    """Basis values and gradients at quadrature points, for assembling reduced forms."""

    def __init__(self, space: FemSpace, basis: NDArray):
        self.space = space
        self.basis = np.atleast_2d(basis)
        self.n = len(self.basis)
        self.qw = space.qw
        self.values = (space.P @ self.basis.T)  # (n_qp, n)
        self.grads = np.stack([space.Gx @ self.basis.T, space.Gy @ self.basis.T], axis=1)  # (n_qp, 2, n)

    def mass(self, c) -> NDArray:
        return np.einsum("q,qi,qj->ij", self.qw * np.broadcast_to(c, self.qw.shape), self.values, self.values)

    def transport(self, b) -> NDArray:
        """``int phi_k (b . grad phi_i)``; ``b`` is ``(n_qp, 2)``."""
        return np.einsum("qk,qd,qdi->ki", self.values * self.qw[:, None], b, self.grads)

    def transport_quadratic(self, b) -> NDArray:
        """``int phi_k phi_l (b . grad phi_i)``."""
        bg = np.einsum("qd,qdi->qi", b, self.grads)
        return np.einsum("q,qk,ql,qi->kli", self.qw, self.values, self.values, bg)

    def diffusion(self, K) -> NDArray:
        """``int grad phi_k . K grad phi_i``; ``K`` is ``(n_qp, 2, 2)``."""
        KG = np.einsum("qde,qei->qdi", K * self.qw[:, None, None], self.grads)
        return np.einsum("qdk,qdi->ki", self.grads, KG)

    def load(self, g) -> NDArray:
        return self.values.T @ (self.qw * g)


def adjugate(J: NDArray) -> NDArray:
    adj = np.empty_like(J)
    adj[:, 0, 0] = J[:, 1, 1]
    adj[:, 1, 1] = J[:, 0, 0]
    adj[:, 0, 1] = -J[:, 0, 1]
    adj[:, 1, 0] = -J[:, 1, 0]
    return adj


def _det(J: NDArray) -> NDArray:
    return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]


def poisson_coefficients(problem: PoissonProblem, mu, mapped: NDArray, J: NDArray) -> dict[str, NDArray]:
    """Stacked coefficient fields: ``K`` (4 per point) and the mapped source ``g`` (1 per point)."""
    det = _det(J)
    K = laplace_coefficient(J)
    g = problem.source(mu, mapped[:, 0], mapped[:, 1]) * det
    return {"K": K.reshape(len(J), 4), "f": g[:, None]}


def advection_coefficients(velocity: NDArray, J: NDArray, mode_grads: NDArray,
                           wdot: NDArray) -> dict[str, NDArray]:
    """``det``, time term ``adj(J) sum wdot grad xi``, advection ``adj(J) a`` and ``adj adj^T / det``."""
    det = _det(J)
    adj = adjugate(J)
    if len(wdot):
        shift = np.tensordot(wdot, mode_grads, axes=1).T  # (n, 2)
    else:
        shift = np.zeros((len(J), 2))
    bt = np.einsum("qde,qe->qd", adj, shift)
    ba = np.einsum("qde,e->qd", adj, velocity)
    K = np.einsum("qde,qfe->qdf", adj, adj) / det[:, None, None]
    return {"mass": det[:, None], "time": bt, "advection": ba, "diffusion": K.reshape(len(J), 4)}


# ---------------------------------------------------------------------------
# artifacts


@dataclass
class OfflineArtifacts:
    """Everything the online phase needs, plus offline diagnostics."""

    options: PipelineOptions
    grid: TensorGrid
    params: NDArray[np.float64]
    snapshots: NDArray[np.float64]
    reference_density: GridDensity | None
    modes: TransportModes
    gp: GpModel | None
    basis: NDArray[np.float64]
    basis_coefficients: NDArray[np.float64]
    spectra: dict[str, NDArray] = field(default_factory=dict)
    eim: dict[str, EimBasis] = field(default_factory=dict)
    tensors: dict[str, NDArray] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def m(self) -> int:
        return self.modes.m

    @property
    def n_m(self) -> int:
        return len(self.basis)

    @property
    def problem(self):
        return self.options.make_problem()

    @property
    def space(self) -> FemSpace:
        if "space" not in self._cache:
            self._cache["space"] = FemSpace(self.grid)
        return self._cache["space"]

    @property
    def reduced(self) -> ReducedSpace:
        if "reduced" not in self._cache:
            self._cache["reduced"] = ReducedSpace(self.space, self.basis)
        return self._cache["reduced"]

    @property
    def qp_mapper(self) -> PointMapper:
        if "qp_mapper" not in self._cache:
            self._cache["qp_mapper"] = PointMapper(self.modes, self.space.qp)
        return self._cache["qp_mapper"]

    def eim_mapper(self, name: str) -> tuple[PointMapper, NDArray, NDArray]:
        """Mapper restricted to the quadrature points an EIM basis touches."""
        key = "eim_mapper_" + name
        if key not in self._cache:
            basis = self.eim[name]
            ncomp = self.meta["eim_components"][name]
            qps = basis.points // ncomp
            uniq, inv = np.unique(qps, return_inverse=True)
            self._cache[key] = (PointMapper(self.modes, self.space.qp[uniq]), inv, basis.points % ncomp)
        return self._cache[key]

    def coefficients(self, mu) -> NDArray:
        """Transport-mode coefficients ``w(mu)`` from the GP (empty without registration)."""
        if self.m == 0 or self.gp is None:
            return np.zeros(0)
        return np.atleast_1d(gp_predict(self.gp, mu))[: self.m]


# ---------------------------------------------------------------------------
# offline


@contextmanager
def _stage(timings: dict, name: str):
    t0 = time.perf_counter()
    log.info("stage %s ...", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - rewrapped with the stage name
        raise StageError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
    log.info("stage %s done in %.2fs", name, timings[name])


def training_parameters(opts: PipelineOptions) -> NDArray:
    """Poisson: seeded uniform draws in the box; advection: the ``alpha`` grid; shift: even spacing."""
    if opts.problem == "poisson":
        rng = np.random.default_rng(opts.seed)
        return PoissonProblem().sample_parameters(opts.n_s, rng)
    if opts.problem == "shift":
        return ShiftProblem().sample_parameters(opts.n_s)
    return np.linspace(0.0, 2.0 * np.pi, opts.n_alpha, endpoint=False)


def compute_snapshots(opts: PipelineOptions, space: FemSpace) -> SnapshotSet:
    problem = opts.make_problem()
    if opts.problem == "poisson":
        return poisson_sweep(problem, space, training_parameters(opts))
    if opts.problem == "shift":
        return shift_sweep(problem, space, training_parameters(opts))
    return advection_sweep(problem, space, training_parameters(opts), problem.t_train)


def snapshot_densities(opts: PipelineOptions, snaps: SnapshotSet, pde_grid: TensorGrid,
                       ot_grid: TensorGrid) -> list[GridDensity]:
    P = interpolation_matrix(pde_grid, ot_grid.points())
    problem = opts.make_problem()
    X, Y = ot_grid.mesh()
    out = []
    for mu, u in zip(snaps.params, snaps.values):
        if opts.density == "f":
            vals = problem.source(mu, X, Y)
        else:
            v = (P @ u).reshape(ot_grid.shape)
            vals = v * v if opts.density == "u2" else np.maximum(v, 0.0)
        out.append(normalize_density(GridField(ot_grid, vals), floor=opts.floor))
    return out


def _inner_product(opts: PipelineOptions, space: FemSpace):
    return space.h1_inner() if opts.problem == "poisson" else space.l2_inner()


def _map_nodal(field_values: NDArray, grid: TensorGrid, points: NDArray) -> NDArray:
    from .registration import _clamp
    return interpolation_matrix(grid, _clamp(points, grid)) @ field_values


def _transport_potentials(opts: PipelineOptions, snaps: SnapshotSet, grid: TensorGrid,
                          ot_grid: TensorGrid, meta: dict, timings: dict, progress):
    """Densities, reference barycenter and one (debiased) potential per snapshot."""
    n_s = len(snaps)
    cfg = SinkhornConfig(opts.epsilon, tol=opts.sinkhorn_tol)
    debias = opts.resolved_debias
    with _stage(timings, "densities"):
        dens = snapshot_densities(opts, snaps, grid, ot_grid)
    with _stage(timings, "barycenter"):
        ref = "product" if debias else "lebesgue"
        rho_bar_ot, info = entropic_barycenter(dens, np.full(n_s, 1.0 / n_s), opts.epsilon,
                                               debias=debias, reference=ref,
                                               tol=opts.barycenter_tol,
                                               max_iter=opts.barycenter_max_iter,
                                               return_info=True, strict=False)
        meta["barycenter"] = {"iterations": info.iterations, "change": info.change,
                              "converged": info.converged, "reference": ref, "debias": debias}
    with _stage(timings, "potentials"):
        cache: dict = {}
        correction = None
        if debias:
            correction = self_potential(rho_bar_ot, cfg, _cache=cache).psi_rho.values
        pots, iters = [], []
        for k, d in enumerate(dens):
            try:
                res = sinkhorn_solve(rho_bar_ot, d, cfg, _cache=cache)
            except SinkhornConvergenceError as exc:
                log.warning("snapshot %d: %s; using last iterate", k, exc)
                res = exc.result
            psi = res.psi_rho.values
            if correction is not None:
                psi = psi - correction
            pots.append(psi.ravel())
            iters.append(res.iterations)
            if progress:
                progress("potentials", k + 1, n_s)
        meta["sinkhorn_iterations"] = [int(i) for i in iters]
    return rho_bar_ot, pots


def offline_train(opts: PipelineOptions, snapshots: SnapshotSet | None = None,
                  progress=None, reuse: dict | None = None) -> OfflineArtifacts:
    """Run every offline stage in order; failures raise ``StageError`` naming the stage.

    ``reuse`` is a dict shared between runs that differ only in truncation
    tolerances: the barycenter and potentials are stored in it on the first
    run and taken from it afterwards.
    """
    t_start = time.perf_counter()
    timings: dict[str, float] = {}
    n = opts.pde_cells + 1
    grid = make_uniform_grid(2, n)
    space = FemSpace(grid)
    problem = opts.make_problem()

    with _stage(timings, "snapshots"):
        snaps = snapshots if snapshots is not None else compute_snapshots(opts, space)
    params, U = snaps.params, snaps.values
    n_s = len(U)
    inner = _inner_product(opts, space)
    spectra: dict[str, NDArray] = {}
    meta: dict = {"n_snapshots": n_s}

    with _stage(timings, "snapshot_spectrum"):
        lam_u, _ = symmetric_eigendecomposition(correlation_matrix(U, inner), method="lapack")
        spectra["u"] = lam_u

    if opts.registration:
        ot_grid = make_uniform_grid(2, opts.ot_factor * opts.pde_cells + 1)
        if reuse is not None and "potentials" in reuse:
            rho_bar_ot, pots = reuse["reference"], reuse["potentials"]
            meta.update(reuse["meta"])
        else:
            rho_bar_ot, pots = _transport_potentials(opts, snaps, grid, ot_grid, meta, timings, progress)
            if reuse is not None:
                reuse.update(reference=rho_bar_ot, potentials=pots,
                             meta={k: meta[k] for k in ("barycenter", "sinkhorn_iterations")})
        with _stage(timings, "projection"):
            R = interpolation_matrix(ot_grid, grid.points())
            projector = BoundaryProjector(FemSpace(grid, dirichlet=False),
                                          ProjectionConfig(opts.resolved_length_scale, opts.penalty))
            psi_pde = np.array([projector(R @ p) for p in pots])
            rho_bar = normalize_density(GridField(grid, np.maximum(R @ rho_bar_ot.flat(), 0.0)))
        with _stage(timings, "transport_modes"):
            emb = MongeEmbeddingSet(rho_bar, psi_pde, params)
            C_psi = embedding_correlation(emb)
            modes = build_transport_modes(emb, opts.tau, method=opts.eig_method,
                                          max_modes=opts.max_modes, correlation=C_psi)
            spectra["psi"] = modes.eigenvalues
        with _stage(timings, "mapped_snapshots"):
            nodes = grid.points()
            mapper = PointMapper(modes, nodes)
            mapped = np.empty_like(U)
            for i in range(n_s):
                pts, _ = mapper(modes.coefficients[i])
                mapped[i] = _map_nodal(U[i], grid, pts)
            mapped[:, space.boundary] = 0.0
    else:
        rho_bar = None
        modes = TransportModes.empty(grid, n_s)
        mapped = U

    with _stage(timings, "reference_basis"):
        C_map = correlation_matrix(mapped, inner)
        pod = pod_from_correlation(C_map, opts.tau, method=opts.eig_method, max_modes=opts.max_basis)
        spectra["mapped"] = pod.eigenvalues
        basis = pod.modes(mapped)
        basis_coefficients = pod.coefficients

    gp = None
    if modes.m:
        with _stage(timings, "gaussian_process"):
            if opts.problem == "poisson":
                box = PoissonProblem().box
                gp = gp_fit(params, modes.coefficients, bounds=[box, box])
            elif opts.problem == "shift":
                gp = gp_fit(params, modes.coefficients, bounds=[problem.box])
            else:
                gp = gp_fit(params, modes.coefficients, periodic=[False, True],
                            bounds=[(0.0, problem.t_train), (0.0, 2.0 * np.pi)])

    art = OfflineArtifacts(opts, grid, params, U, rho_bar, modes, gp, basis, basis_coefficients,
                           spectra, {}, {}, timings, meta)
    if opts.eim and modes.m:
        if opts.problem == "poisson":
            _train_poisson_eim(art)
        elif opts.problem == "advection":
            _train_advection_eim(art)
    art.meta["total_offline_seconds"] = time.perf_counter() - t_start
    art.meta.update(m=art.m, n_m=art.n_m, version=ARTIFACT_VERSION)
    return art


def _eim_for(art: OfflineArtifacts, name: str, fields_: NDArray, ncomp: int, tau: float) -> None:
    wts = np.repeat(art.space.qw, ncomp)
    with _stage(art.timings, "eim_" + name):
        art.eim[name] = eim_from_snapshots(fields_, wts, tau, method=art.options.eig_method, normalize=art.options.eim_normalize,
                                           max_terms=art.options.eim_max_terms)
        art.spectra["eim_" + name] = art.eim[name].pod.eigenvalues
    art.meta.setdefault("eim_components", {})[name] = ncomp


def _train_poisson_eim(art: OfflineArtifacts) -> None:
    problem = art.problem
    opts = art.options
    tau = opts.resolved_tau_eim
    n_extra = 10 * opts.n_s if opts.eim_samples is None else opts.eim_samples
    mus, W = art.params, art.modes.coefficients
    if n_extra:
        extra = problem.sample_parameters(n_extra, np.random.default_rng(opts.seed + 1))
        mus = np.vstack([mus, extra])
        W = np.vstack([W, np.atleast_2d(gp_predict(art.gp, extra))[:, : art.m]])
    art.meta["eim_training_size"] = len(mus)
    Ks, Fs = [], []
    for mu, w in zip(mus, W):
        pts, J = art.qp_mapper(w)
        c = poisson_coefficients(problem, mu, pts, J)
        Ks.append(c["K"].ravel())
        Fs.append(c["f"].ravel())
    _eim_for(art, "K", np.array(Ks), 4, tau)
    _eim_for(art, "f", np.array(Fs), 1, tau)
    red = art.reduced
    nq = art.space.n_qp
    art.tensors["K"] = np.array([red.diffusion(X.reshape(nq, 2, 2)) for X in art.eim["K"].functions])
    art.tensors["f"] = np.array([red.load(X) for X in art.eim["f"].functions])
    art.meta["Q"] = {k: art.eim[k].Q for k in ("K", "f")}


def _advection_schedule(art: OfflineArtifacts, alpha: float, T: float):
    """``(t_mid, w_mid, wdot)`` per step from GP predictions and centred differences."""
    problem = art.problem
    dt = problem.dt
    steps = problem.n_steps(T)
    times = np.arange(steps + 1) * dt
    if art.m == 0:
        z = np.zeros((steps, 0))
        return times, z, z
    W = gp_predict(art.gp, np.column_stack([times, np.full_like(times, alpha)]))[:, : art.m]
    w_mid = 0.5 * (W[1:] + W[:-1])
    wdot = (W[1:] - W[:-1]) / dt
    return times, w_mid, wdot


def _train_advection_eim(art: OfflineArtifacts) -> None:
    problem = art.problem
    grads_qp = art.qp_mapper.grad
    samples = {k: [] for k in ("mass", "time", "advection", "diffusion")}
    for alpha in training_parameters(art.options):
        _, w_mid, wdot = _advection_schedule(art, alpha, problem.t_train)
        a = problem.velocity(alpha)
        for wm, wd in zip(w_mid, wdot):
            _, J = art.qp_mapper(wm)
            c = advection_coefficients(a, J, grads_qp, wd)
            for k in samples:
                samples[k].append(c[k].ravel())
    tau = art.options.resolved_tau_eim
    ncomp = {"mass": 1, "time": 2, "advection": 2, "diffusion": 4}
    for k in samples:
        _eim_for(art, k, np.array(samples[k]), ncomp[k], tau)
    red = art.reduced
    nq = art.space.n_qp
    art.tensors["mass"] = np.array([red.mass(X) for X in art.eim["mass"].functions])
    art.tensors["time"] = np.array([red.transport(X.reshape(nq, 2)) for X in art.eim["time"].functions])
    art.tensors["advection"] = np.array([red.transport(X.reshape(nq, 2)) for X in art.eim["advection"].functions])
    art.tensors["advection_quadratic"] = np.array(
        [red.transport_quadratic(X.reshape(nq, 2)) for X in art.eim["advection"].functions])
    art.tensors["diffusion"] = np.array(
        [red.diffusion(X.reshape(nq, 2, 2)) for X in art.eim["diffusion"].functions])
    art.meta["Q"] = {k: art.eim[k].Q for k in samples}


def plain_pod_artifacts(art: OfflineArtifacts, n: int) -> OfflineArtifacts:
    """Classical RB on the same snapshots: no registration, ``n`` basis functions."""
    opts = replace(art.options, registration=False, eim=False, max_basis=n, tau=1e-14)
    snaps = SnapshotSet(art.params, art.snapshots)
    return offline_train(opts, snapshots=snaps)


# ---------------------------------------------------------------------------
# online


@dataclass
class OnlineSolution:
    """Reduced coefficients for one parameter (and time, for advection).

    The reference-domain field is built from ``basis`` on first access, so
    the reduced solve itself never touches ``N``-sized arrays.
    """

    mu: NDArray[np.float64]
    coefficients: NDArray[np.float64]
    grid: TensorGrid
    basis: NDArray[np.float64]
    w: NDArray[np.float64]
    physical_field: GridField | None = None
    time: float | None = None
    timings: dict[str, float] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    _reference: GridField | None = field(default=None, repr=False)

    @property
    def reference_field(self) -> GridField:
        if self._reference is None:
            self._reference = GridField(self.grid, self.coefficients @ self.basis)
        return self._reference


class FoldedMappingWarning(UserWarning):
    pass


def _mapping_check(J: NDArray, where: NDArray, diagnostics: dict, strict: bool) -> None:
    """Record the minimum determinant; nonpositive values warn (or raise when ``strict``)."""
    det = _det(J)
    q = int(np.argmin(det))
    diagnostics["min_det"] = min(float(det[q]), diagnostics.get("min_det", np.inf))
    if det[q] > 0:
        return
    msg = (f"nonpositive mapping determinant {det[q]:.3e} at y = "
           f"({where[q, 0]:.4f}, {where[q, 1]:.4f})")
    if strict:
        raise MappingError(msg)
    warnings.warn(msg, FoldedMappingWarning, stacklevel=3)


def _eim_point_values(art: OfflineArtifacts, name: str, compute) -> NDArray:
    """Coefficient field of form ``name`` at its EIM points only."""
    mapper, inv, comp = art.eim_mapper(name)
    vals = compute(mapper)  # (n_unique, ncomp)
    return vals[inv, comp]


def online_solve_poisson(art: OfflineArtifacts, mu, use_eim: bool = False,
                         remap: bool = True, strict: bool = False) -> OnlineSolution:
    """Reduced Poisson solve in the reference domain; EIM path avoids any ``N``-sized work.

    A folded mapping (nonpositive determinant) is reported in
    ``diagnostics["min_det"]`` and warned about; ``strict`` raises instead.
    """
    if art.options.problem != "poisson":
        raise ValueError("artifacts were not trained on the Poisson problem")
    mu = np.asarray(mu, dtype=float).ravel()
    problem = art.problem
    timings: dict[str, float] = {}
    lo, hi = problem.box
    diag: dict = {"extrapolated": bool(np.any(mu < lo) or np.any(mu > hi))}
    if diag["extrapolated"]:
        log.warning("mu=%s lies outside the training box %s", mu, problem.box)
    t0 = time.perf_counter()
    w = art.coefficients(mu)
    timings["gp"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if use_eim:
        if not art.eim:
            raise ValueError("artifacts carry no EIM data")

        def poisson_at(name):
            def compute(mapper):
                pts, J = mapper(w)
                _mapping_check(J, mapper.points, diag, strict)
                return poisson_coefficients(problem, mu, pts, J)[name]
            return _eim_point_values(art, name, compute)

        theta_K = eim_coefficients(art.eim["K"], poisson_at("K"))
        theta_f = eim_coefficients(art.eim["f"], poisson_at("f"))
        A = np.tensordot(theta_K, art.tensors["K"], axes=1)
        F = theta_f @ art.tensors["f"]
    else:
        red = art.reduced
        pts, J = art.qp_mapper(w)
        _mapping_check(J, art.space.qp, diag, strict)
        c = poisson_coefficients(problem, mu, pts, J)
        A = red.diffusion(c["K"].reshape(-1, 2, 2))
        F = red.load(c["f"][:, 0])
    timings["assembly"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    try:
        coef = np.linalg.solve(A, F)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular reduced system at mu={mu}") from exc
    timings["solve"] = time.perf_counter() - t0
    sol = OnlineSolution(mu, coef, art.grid, art.basis, w, timings=timings, diagnostics=diag)
    sol.diagnostics["energy"] = float(np.sqrt(max(coef @ A @ coef, 0.0)))
    if remap:
        remap_to_physical(sol, art)
    return sol


def _advection_operators(art: OfflineArtifacts, red: ReducedSpace, alpha: float, w_mid, wdot,
                         use_eim: bool, diag: dict, strict: bool) -> dict[str, NDArray]:
    problem = art.problem
    a = problem.velocity(alpha)
    if art.m == 0:
        nq = art.space.n_qp
        J = np.broadcast_to(np.eye(2), (nq, 2, 2))
        c = advection_coefficients(a, J, np.zeros((0, 2, nq)), np.zeros(0))
        return _assemble_advection(red, c)
    if use_eim:
        thetas = {}
        for name in ("mass", "time", "advection", "diffusion"):
            def compute(mapper, name=name):
                _, J = mapper(w_mid)
                _mapping_check(J, mapper.points, diag, strict)
                return advection_coefficients(a, J, mapper.grad, wdot)[name]
            thetas[name] = eim_coefficients(art.eim[name], _eim_point_values(art, name, compute))
        T = art.tensors
        return {
            "mass": np.tensordot(thetas["mass"], T["mass"], axes=1),
            "time": np.tensordot(thetas["time"], T["time"], axes=1),
            "advection": np.tensordot(thetas["advection"], T["advection"], axes=1),
            "advection_quadratic": np.tensordot(thetas["advection"], T["advection_quadratic"], axes=1),
            "diffusion": np.tensordot(thetas["diffusion"], T["diffusion"], axes=1),
        }
    _, J = art.qp_mapper(w_mid)
    _mapping_check(J, art.space.qp, diag, strict)
    c = advection_coefficients(a, J, art.qp_mapper.grad, wdot)
    return _assemble_advection(red, c)


def _assemble_advection(red: ReducedSpace, c: dict[str, NDArray]) -> dict[str, NDArray]:
    nq = len(red.qw)
    return {
        "mass": red.mass(c["mass"][:, 0]),
        "time": red.transport(c["time"]),
        "advection": red.transport(c["advection"]),
        "advection_quadratic": red.transport_quadratic(c["advection"]),
        "diffusion": red.diffusion(c["diffusion"].reshape(nq, 2, 2)),
    }


def reduced_midpoint_step(ops: dict[str, NDArray], u_n: NDArray, dt: float, gamma: float,
                          beta: float) -> NDArray:
    """Implicit midpoint on the reduced system; Newton with a Picard fallback."""
    M = ops["mass"]
    L = ops["time"] + ops["advection"] + beta * ops["diffusion"]
    A2 = ops["advection_quadratic"]

    def residual(v):
        um = 0.5 * (v + u_n)
        return M @ (v - u_n) / dt + L @ um + 2.0 * gamma * np.einsum("kli,l,i->k", A2, um, um)

    def jac(v, frozen=False):
        um = 0.5 * (v + u_n)
        N2 = np.einsum("kli,l->ki", A2, um)
        if frozen:
            return M / dt + 0.5 * (L + 2.0 * gamma * N2)
        N1 = np.einsum("kli,i->kl", A2, um)
        return M / dt + 0.5 * (L + 2.0 * gamma * (N1 + N2))

    scale = max(np.linalg.norm(M @ u_n) / dt, 1e-300)
    v, _ = midpoint_newton(residual, jac, u_n.copy(), scale, picard=lambda v: jac(v, True),
                           solve=np.linalg.solve)
    return v


def _initial_coefficients(art: OfflineArtifacts, red: ReducedSpace, alpha: float) -> tuple[NDArray, NDArray]:
    """Physical-domain L2 projection of the initial condition onto ``phi_i o Phi``."""
    problem = art.problem
    if art.m:
        w0 = np.atleast_1d(gp_predict(art.gp, [0.0, alpha]))[: art.m]
        pts, J = art.qp_mapper(w0)
    else:
        w0 = np.zeros(0)
        pts, J = art.space.qp, np.broadcast_to(np.eye(2), (art.space.n_qp, 2, 2))
    det = _det(J)
    M = red.mass(det)
    F = red.load(problem.initial(pts[:, 0], pts[:, 1]) * det)
    return np.linalg.solve(M, F), w0


def online_advance_advection(art: OfflineArtifacts, alpha: float, T: float | None = None,
                             use_eim: bool | None = None, remap: bool = True,
                             remap_every: int = 1, strict: bool = False) -> list[OnlineSolution]:
    """Reduced trajectory at ``t = 0, dt, ..., T``; physical fields every ``remap_every`` steps."""
    if art.options.problem != "advection":
        raise ValueError("artifacts were not trained on the advection problem")
    problem = art.problem
    T = problem.horizon if T is None else T
    if T > problem.horizon + 1e-12:
        raise ValueError(f"T={T} beyond the configured horizon {problem.horizon}")
    use_eim = bool(art.eim) if use_eim is None else use_eim
    red = art.reduced
    times, w_mid, wdot = _advection_schedule(art, alpha, T)
    coef, w0 = _initial_coefficients(art, red, alpha)
    traj = [OnlineSolution(np.array([0.0, alpha]), coef, art.grid, art.basis, w0, time=0.0)]
    # without registration the operators do not change in time
    fixed_ops = _advection_operators(art, red, alpha, None, None, False, {}, strict) if art.m == 0 else None
    for k in range(len(times) - 1):
        t0 = time.perf_counter()
        diag: dict = {}
        if fixed_ops is not None:
            ops = fixed_ops
        else:
            ops = _advection_operators(art, red, alpha, w_mid[k], wdot[k], use_eim, diag, strict)
        coef = reduced_midpoint_step(ops, coef, problem.dt, problem.gamma, problem.beta)
        t = times[k + 1]
        w = art.coefficients([t, alpha])
        sol = OnlineSolution(np.array([t, alpha]), coef, art.grid, art.basis, w, time=float(t),
                             timings={"step": time.perf_counter() - t0}, diagnostics=diag)
        traj.append(sol)
    if remap:
        for k, sol in enumerate(traj):
            if k % remap_every == 0 or k == len(traj) - 1:
                remap_to_physical(sol, art)
    return traj


def remap_to_physical(sol: OnlineSolution, art: OfflineArtifacts) -> GridField:
    """``sum u_i phi_i o Phi`` at the nodes, with ``Phi`` from the soft c-transform."""
    t0 = time.perf_counter()
    if art.m == 0 or not np.any(sol.w):
        sol.physical_field = sol.reference_field
        sol.diagnostics["roundtrip_error"] = 0.0
    else:
        mapping = invert_map(art.modes, sol.w, art.options.eps_fine)
        fwd = mapping.forward.as_array().reshape(2, -1).T
        vals = _map_nodal(sol.reference_field.flat(), art.grid, fwd)
        vals[art.space.boundary] = 0.0
        sol.physical_field = GridField(art.grid, vals)
        sol.diagnostics["roundtrip_error"] = mapping.roundtrip_error
        sol.diagnostics["min_det_nodes"] = mapping.min_det
    sol.timings["remap"] = time.perf_counter() - t0
    return sol.physical_field


def reference_domain_error(sol: OnlineSolution, art: OfflineArtifacts, hf: NDArray) -> float:
    """Relative L2 error of the reduced field against the mapped high-fidelity solution."""
    if art.m == 0:
        target = hf
    else:
        pts, _ = PointMapper(art.modes, art.grid.points())(sol.w)
        target = _map_nodal(hf, art.grid, pts)
        target[art.space.boundary] = 0.0
    M = art.space.mass()
    e = sol.reference_field.flat() - target
    return float(np.sqrt(e @ M @ e) / np.sqrt(target @ M @ target))


# ---------------------------------------------------------------------------
# error reporting


@dataclass
class ErrorReport:
    """Per-parameter relative errors with aggregates."""

    params: NDArray[np.float64]
    l2: NDArray[np.float64]
    h1: NDArray[np.float64]
    energy: NDArray[np.float64]
    extra: dict[str, NDArray] = field(default_factory=dict)

    def aggregates(self) -> dict[str, dict[str, float]]:
        out = {}
        for name in ("l2", "h1", "energy", *self.extra):
            v = getattr(self, name) if name in ("l2", "h1", "energy") else self.extra[name]
            v = np.asarray(v, dtype=float)
            if v.size == 0:
                # empty test set: no statistic, serialized as null
                out[name] = {"avg": None, "max": None, "min": None}
            else:
                out[name] = {"avg": float(v.mean()), "max": float(v.max()), "min": float(v.min())}
        return out

    def write_csv(self, path, header: dict | None = None) -> None:
        cols = ["l2", "h1", "energy", *self.extra]
        with open(path, "w", newline="") as fh:
            if header is not None:
                fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
            wr = csv.writer(fh)
            npar = self.params.shape[1] if self.params.ndim == 2 else 0
            wr.writerow([f"param{k}" for k in range(npar)] + cols)
            for i in range(len(self.l2)):
                row = [f"{p:.17g}" for p in np.atleast_1d(self.params[i])]
                row += [f"{self.l2[i]:.17g}", f"{self.h1[i]:.17g}", f"{self.energy[i]:.17g}"]
                row += [f"{self.extra[k][i]:.17g}" for k in self.extra]
                wr.writerow(row)

    def write_json(self, path, header: dict | None = None) -> None:
        payload = {"aggregates": self.aggregates(), "count": int(len(self.l2))}
        if header is not None:
            payload["config"] = header
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def relative_errors(u: NDArray, ref: NDArray, space: FemSpace) -> tuple[float, float, float]:
    """Relative L2, relative H1 and relative error of the H1 seminorm."""
    M, S = space.mass(), space.stiffness()
    e = u - ref
    l2_ref = math.sqrt(ref @ M @ ref)
    h1_ref = math.sqrt(ref @ (M + S) @ ref)
    semi_ref = math.sqrt(ref @ S @ ref)
    l2 = math.sqrt(max(e @ M @ e, 0.0)) / l2_ref if l2_ref > 0 else math.sqrt(max(e @ M @ e, 0.0))
    h1 = math.sqrt(max(e @ (M + S) @ e, 0.0)) / h1_ref if h1_ref > 0 else math.sqrt(max(e @ (M + S) @ e, 0.0))
    semi = math.sqrt(max(u @ S @ u, 0.0))
    en = abs(semi - semi_ref) / semi_ref if semi_ref > 0 else semi
    return l2, h1, en


def error_report(solutions, hf_reference, space: FemSpace, params=None) -> ErrorReport:
    """Compare fields (physical when available) with high-fidelity nodal vectors."""
    sols = list(solutions)
    refs = [np.asarray(r.flat() if isinstance(r, GridField) else r, dtype=float) for r in hf_reference]
    if len(sols) != len(refs):
        raise ValueError("solutions and references differ in number")
    l2, h1, en, ps = [], [], [], []
    for s, r in zip(sols, refs):
        if isinstance(s, OnlineSolution):
            u = (s.physical_field or s.reference_field).flat()
            ps.append(np.atleast_1d(s.mu))
        else:
            u = np.asarray(s.flat() if isinstance(s, GridField) else s, dtype=float)
        a, b, c = relative_errors(u, r, space)
        l2.append(a)
        h1.append(b)
        en.append(c)
    if params is not None and len(sols):
        P = np.asarray(params, dtype=float).reshape(len(sols), -1)
    elif ps:
        P = np.array(ps)
    else:
        P = np.zeros((len(sols), 0))
    return ErrorReport(P, np.array(l2), np.array(h1), np.array(en))


# ---------------------------------------------------------------------------
# artifact I/O


def save_artifacts(art: OfflineArtifacts, directory) -> Path:
    """Directory with ``manifest.json`` plus one ``.npy`` blob per array."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blobs: dict[str, NDArray] = {
        "params": art.params, "snapshots": art.snapshots, "basis": art.basis,
        "basis_coefficients": art.basis_coefficients,
        "modes": art.modes.modes, "mode_eigenvalues": art.modes.eigenvalues,
        "mode_coefficients": art.modes.coefficients,
    }
    if art.reference_density is not None:
        blobs["reference_density"] = art.reference_density.flat()
    for k, v in art.spectra.items():
        blobs["spectrum_" + k] = v
    for k, b in art.eim.items():
        blobs[f"eim_{k}_functions"] = b.functions
        blobs[f"eim_{k}_points"] = b.points
        blobs[f"eim_{k}_matrix"] = b.matrix
    for k, v in art.tensors.items():
        blobs["tensor_" + k] = v
    for name in sorted(blobs):
        np.save(d / f"{name}.npy", np.asarray(blobs[name]), allow_pickle=False)
    manifest = {
        "version": ARTIFACT_VERSION,
        "options": art.options.to_dict(),
        "grid": art.grid.to_dict(),
        "gp": art.gp.to_dict() if art.gp is not None else None,
        "eim": sorted(art.eim),
        "tensors": sorted(art.tensors),
        "spectra": sorted(art.spectra),
        "timings": art.timings,
        "meta": art.meta,
        "blobs": sorted(blobs),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return d


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def load_artifacts(directory) -> OfflineArtifacts:
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no manifest in {d}")
    manifest = json.loads(mf.read_text())
    if manifest.get("version") != ARTIFACT_VERSION:
        raise ArtifactVersionError(f"artifact version {manifest.get('version')} != {ARTIFACT_VERSION}")
    load = lambda name: np.load(d / f"{name}.npy", allow_pickle=False)
    opts = PipelineOptions.from_dict(manifest["options"])
    grid = TensorGrid.from_dict(manifest["grid"])
    modes_arr = load("modes")
    if len(modes_arr):
        modes = TransportModes.from_modes(grid, modes_arr, load("mode_coefficients"), load("mode_eigenvalues"))
    else:
        modes = TransportModes.empty(grid, len(load("params")))
    rho_bar = None
    if "reference_density" in manifest["blobs"]:
        rho_bar = GridDensity(grid, load("reference_density"))
    gp = GpModel.from_dict(manifest["gp"]) if manifest["gp"] else None
    eim = {k: EimBasis(load(f"eim_{k}_functions"), load(f"eim_{k}_points"), load(f"eim_{k}_matrix"))
           for k in manifest["eim"]}
    tensors = {k: load("tensor_" + k) for k in manifest["tensors"]}
    spectra = {k: load("spectrum_" + k) for k in manifest["spectra"]}
    return OfflineArtifacts(opts, grid, load("params"), load("snapshots"), rho_bar, modes, gp,
                            load("basis"), load("basis_coefficients"), spectra, eim, tensors,
                            manifest["timings"], manifest["meta"])


# ---------------------------------------------------------------------------
# experiment drivers


def draw_test_parameters(problem: str, n: int, seed: int) -> NDArray:
    """Fixed-seed test draws: ``mu`` in the Poisson box or angles in ``[0, 2 pi)``."""
    rng = np.random.default_rng(seed)
    if problem == "poisson":
        return PoissonProblem().sample_parameters(n, rng)
    return rng.uniform(0.0, 2.0 * np.pi, n)


def poisson_test_errors(art: OfflineArtifacts, mus: NDArray, use_eim: bool,
                        hf: list[NDArray] | None = None) -> tuple[ErrorReport, list[OnlineSolution]]:
    problem = art.problem
    if hf is None:
        hf = [problem.solve(art.space, mu) for mu in mus]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FoldedMappingWarning)
        sols = [online_solve_poisson(art, mu, use_eim=use_eim) for mu in mus]
    return error_report(sols, hf, art.space, params=mus), sols


TABLE_COLUMNS = ("method", "tau", "n", "m", "Q_K", "Q_f", "l2_avg", "l2_max", "h1_avg", "h1_max",
                 "energy_avg", "energy_max")


def tau_sweep(opts: PipelineOptions, taus=(1e-3, 1e-4, 1e-5), n_t: int = 50,
              test_seed: int = 1, use_eim: bool = True) -> list[dict]:
    """Registered and plain-POD error rows per tolerance, shaped like the Poisson results table.

    Snapshots, barycenter and potentials are computed once.  Plain POD uses
    ``n = n_m + m`` basis functions.
    """
    if opts.problem != "poisson":
        raise ValueError("the tolerance sweep is defined for the Poisson problem")
    grid = make_uniform_grid(2, opts.pde_cells + 1)
    space = FemSpace(grid)
    snaps = compute_snapshots(opts, space)
    mus = draw_test_parameters("poisson", n_t, test_seed)
    problem = opts.make_problem()
    hf = [problem.solve(space, mu) for mu in mus]
    reuse: dict = {}
    rows = []
    for tau in taus:
        art = offline_train(replace(opts, tau=tau, tau_eim=None), snapshots=snaps, reuse=reuse)
        eim = use_eim and bool(art.eim)
        rep, _ = poisson_test_errors(art, mus, eim, hf)
        q = art.meta.get("Q", {})
        rows.append(_row("registered" + ("+eim" if eim else ""), tau, art.n_m, art.m,
                         q.get("K"), q.get("f"), rep))
        plain = plain_pod_artifacts(art, art.n_m + art.m)
        rep_p, _ = poisson_test_errors(plain, mus, False, hf)
        rows.append(_row("plain", tau, plain.n_m, 0, None, None, rep_p))
    return rows


def _row(method, tau, n, m, qk, qf, rep: ErrorReport) -> dict:
    agg = rep.aggregates()
    return {"method": method, "tau": tau, "n": n, "m": m, "Q_K": qk, "Q_f": qf,
            "l2_avg": agg["l2"]["avg"], "l2_max": agg["l2"]["max"],
            "h1_avg": agg["h1"]["avg"], "h1_max": agg["h1"]["max"],
            "energy_avg": agg["energy"]["avg"], "energy_max": agg["energy"]["max"]}


def write_table(path, rows: list[dict], header: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True, default=_json_default) + "\n")
        wr = csv.DictWriter(fh, fieldnames=list(TABLE_COLUMNS))
        wr.writeheader()
        for r in rows:
            wr.writerow({k: ("" if r.get(k) is None else
                             (f"{r[k]:.6e}" if isinstance(r[k], float) else r[k])) for k in TABLE_COLUMNS})


def write_series(path, x: NDArray, y: NDArray, header: str | None = None) -> None:
    """Two-column ``.dat`` file."""
    with open(path, "w") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for a, b in zip(np.ravel(x), np.ravel(y)):
            fh.write(f"{a:.17g} {b:.17g}\n")


def advection_error_series(art: OfflineArtifacts, alphas, T: float | None = None,
                           use_eim: bool | None = None) -> tuple[NDArray, NDArray, list[OnlineSolution]]:
    """Mean relative L2 error over ``alphas`` at every time step, and the final-time solutions."""
    problem = art.problem
    T = problem.horizon if T is None else T
    op = AdvectionOperator(problem, art.space)
    errs, finals = [], []
    for alpha in np.atleast_1d(alphas):
        hf = op.trajectory(float(alpha), T)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FoldedMappingWarning)
            traj = online_advance_advection(art, float(alpha), T, use_eim=use_eim)
        rep = error_report(traj, hf, art.space)
        errs.append(rep.l2)
        finals.append(traj[-1])
    times = np.arange(problem.n_steps(T) + 1) * problem.dt
    return times, np.mean(errs, axis=0), finals
