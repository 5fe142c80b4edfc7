"""Transport modes from Monge embeddings and the parameter-dependent mapping they define.

Potentials ``psi_i`` describe maps ``y -> y - grad psi_i(y)`` out of a
reference density ``rho_bar``.  Their POD under the ``L2(rho_bar)`` gradient
inner product gives transport modes ``xi_j``; a coefficient vector ``w``
then defines ``Phi^{-1}(y) = y - sum_j w_j grad xi_j(y)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from .entropic_ot import GibbsOperator
from .pde.fem import FemSpace
from .pod import PodBasis, pod_from_correlation
from .tensor_grid import (
    GridDensity,
    GridField,
    GridMismatchError,
    GridVectorField,
    TensorGrid,
    _gradient_axis,
    hessian_array,
    interpolation_matrix,
)

log = logging.getLogger(__name__)


class ConvexityWarning(UserWarning):
    """``|y|^2/2 - sum w xi`` is not discretely convex; the inversion is unreliable."""


def _grad(values: NDArray, grid: TensorGrid) -> NDArray:
    """Nodal gradient, shape ``(dim, *shape)``."""
    return np.stack([_gradient_axis(values, grid.spacing[k], k) for k in range(grid.dim)])


@dataclass(frozen=True)
class MongeEmbeddingSet:
    """Reference density plus one potential per snapshot (rows of ``potentials``)."""

    reference: GridDensity
    potentials: NDArray[np.float64]
    parameters: NDArray[np.float64]

    def __post_init__(self) -> None:
        P = np.asarray(self.potentials, dtype=float)
        P = P.reshape(len(P), -1)
        if P.shape[1] != self.reference.grid.size:
            raise GridMismatchError("potentials do not live on the reference grid")
        if len(P) < 1:
            raise ValueError("need at least one potential")
        object.__setattr__(self, "potentials", P)
        object.__setattr__(self, "parameters", np.asarray(self.parameters, dtype=float).reshape(len(P), -1))

    @classmethod
    def from_fields(cls, reference: GridDensity, potentials, parameters) -> "MongeEmbeddingSet":
        for p in potentials:
            if p.grid != reference.grid:
                raise GridMismatchError("potential and reference grids differ")
        return cls(reference, np.array([p.flat() for p in potentials]), parameters)

    @property
    def grid(self) -> TensorGrid:
        return self.reference.grid

    def gradient_weights(self) -> NDArray:
        return self.reference.flat() * self.grid.weights().ravel()

    def gradients(self) -> NDArray:
        """``(n_s, dim, N)`` nodal gradients."""
        g = self.grid
        return np.array([_grad(p.reshape(g.shape), g).reshape(g.dim, -1) for p in self.potentials])


def embedding_correlation(emb: MongeEmbeddingSet) -> NDArray[np.float64]:
    """``<grad psi_i, grad psi_j>_{L2(rho_bar)}`` by nodal quadrature."""
    G = emb.gradients()
    wts = emb.gradient_weights()
    C = np.einsum("idn,jdn,n->ij", G, G, wts)
    return 0.5 * (C + C.T)


@dataclass(frozen=True)
class TransportModes:
    """Retained transport modes with their derivatives and training coefficients.

    ``modes`` is ``(m, N)``; ``coefficients`` is ``(n_s, m)``, row ``i`` being
    ``w(mu_i)``.  ``gradients`` is ``(m, dim, N)`` and ``hessians`` ``(m, dim, dim, N)``.
    """

    grid: TensorGrid
    modes: NDArray[np.float64]
    eigenvalues: NDArray[np.float64]
    coefficients: NDArray[np.float64]
    gradients: NDArray[np.float64]
    hessians: NDArray[np.float64]
    anchor: tuple[int, ...]
    pod: PodBasis | None = None

    @property
    def m(self) -> int:
        return len(self.modes)

    def potential(self, w) -> NDArray:
        w = np.asarray(w, dtype=float)
        return w @ self.modes if self.m else np.zeros(self.grid.size)

    def fields(self) -> list[GridField]:
        return [GridField(self.grid, x) for x in self.modes]

    def truncate(self, m: int) -> "TransportModes":
        return TransportModes(self.grid, self.modes[:m], self.eigenvalues, self.coefficients[:, :m],
                              self.gradients[:m], self.hessians[:m], self.anchor, self.pod)

    @classmethod
    def empty(cls, grid: TensorGrid, n_s: int = 0) -> "TransportModes":
        d, N = grid.dim, grid.size
        return cls(grid, np.zeros((0, N)), np.zeros(0), np.zeros((n_s, 0)), np.zeros((0, d, N)),
                   np.zeros((0, d, d, N)), grid.center_index())

    @classmethod
    def from_modes(cls, grid: TensorGrid, modes: NDArray, coefficients: NDArray | None = None,
                   eigenvalues: NDArray | None = None) -> "TransportModes":
        """Wrap given mode fields; derivatives are taken numerically."""
        modes = np.atleast_2d(np.asarray(modes, dtype=float)).reshape(-1, grid.size)
        m = len(modes)
        grads = np.array([_grad(x.reshape(grid.shape), grid).reshape(grid.dim, -1) for x in modes])
        # extrapolated boundary curvature folds strongly compressing maps
        hess = np.array([hessian_array(x.reshape(grid.shape), grid, boundary_order=1)
                         .reshape(grid.dim, grid.dim, -1)
                         for x in modes])
        coefficients = np.zeros((0, m)) if coefficients is None else np.asarray(coefficients, dtype=float)
        eigenvalues = np.ones(m) if eigenvalues is None else np.asarray(eigenvalues, dtype=float)
        return cls(grid, modes, eigenvalues, coefficients, grads.reshape(m, grid.dim, -1),
                   hess.reshape(m, grid.dim, grid.dim, -1), grid.center_index())


def build_transport_modes(emb: MongeEmbeddingSet, tau: float, method: str = "jacobi",
                          max_modes: int | None = None,
                          correlation: NDArray | None = None) -> TransportModes:
    """POD of the embedding correlation, modes anchored to vanish at the grid centre."""
    C = embedding_correlation(emb) if correlation is None else correlation
    grid = emb.grid
    if not np.any(C):
        log.info("all potentials have zero gradient; no transport modes")
        return TransportModes.empty(grid, len(emb.potentials))
    pod = pod_from_correlation(C, tau, method=method, max_modes=max_modes)
    modes = pod.coefficients @ emb.potentials
    anchor = grid.center_index()
    flat_anchor = int(np.ravel_multi_index(anchor, grid.shape))
    modes = modes - modes[:, flat_anchor][:, None]
    tm = TransportModes.from_modes(grid, modes, pod.snapshot_coordinates().T, pod.eigenvalues)
    return TransportModes(grid, tm.modes, pod.eigenvalues, tm.coefficients, tm.gradients,
                          tm.hessians, anchor, pod)


# ---------------------------------------------------------------------------
# boundary projection


@dataclass(frozen=True)
class ProjectionConfig:
    """``length_scale`` weights the gradient term by its square; ``penalty`` is ``delta``."""

    length_scale: float
    penalty: float = 1e-9

    def __post_init__(self) -> None:
        if not self.length_scale > 0 or not self.penalty > 0:
            raise ValueError("length_scale and penalty must be positive")

    @classmethod
    def from_epsilon(cls, eps: float, penalty: float = 1e-9) -> "ProjectionConfig":
        return cls(float(np.sqrt(eps)), penalty)


class BoundaryProjector:
    """Factorized penalized H1 projection onto potentials with zero normal slope."""

    def __init__(self, space: FemSpace, cfg: ProjectionConfig):
        if space.dirichlet:
            space = FemSpace(space.grid, dirichlet=False)
        self.space = space
        self.cfg = cfg
        k2 = cfg.length_scale ** 2
        self.rhs_matrix = (k2 * space.stiffness() + space.mass()).tocsr()
        lhs = (self.rhs_matrix + space.boundary_flux() / cfg.penalty).tocsc()
        self._lu = spla.splu(lhs)

    def __call__(self, psi_pre: NDArray) -> NDArray:
        out = self._lu.solve(self.rhs_matrix @ np.asarray(psi_pre, dtype=float).ravel())
        if not np.all(np.isfinite(out)):
            raise np.linalg.LinAlgError("boundary projection produced non-finite values")
        return out


def h1_boundary_projection(psi_pre: GridField, cfg: ProjectionConfig) -> GridField:
    """Penalized projection enforcing ``grad psi . n = 0`` on the boundary of a 2D grid."""
    proj = BoundaryProjector(FemSpace(psi_pre.grid, dirichlet=False), cfg)
    return GridField(psi_pre.grid, proj(psi_pre.flat()))


# ---------------------------------------------------------------------------
# mappings


@dataclass
class MappingEvaluation:
    """``Phi^{-1}``, its Jacobian and determinant on the nodes; forward map when inverted."""

    inverse: GridVectorField
    jacobian: NDArray[np.float64]
    det: NDArray[np.float64]
    forward: GridVectorField | None = None
    roundtrip_error: float | None = None
    convex: bool | None = None
    meta: dict = field(default_factory=dict)

    @property
    def min_det(self) -> float:
        return float(self.det.min())

    @property
    def grid(self) -> TensorGrid:
        return self.inverse.grid


def _det2(J: NDArray) -> NDArray:
    return J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]


def build_inverse_map(modes: TransportModes, w) -> MappingEvaluation:
    """``Phi^{-1} = id - grad(sum w xi)`` and ``D Phi^{-1} = Id - sum w D^2 xi`` at the nodes."""
    w = np.asarray(w, dtype=float).ravel()
    if w.shape != (modes.m,):
        raise ValueError(f"expected {modes.m} coefficients, got {w.size}")
    grid = modes.grid
    d = grid.dim
    coords = np.stack(grid.mesh()).reshape(d, -1)
    disp = np.tensordot(w, modes.gradients, axes=1) if modes.m else np.zeros((d, grid.size))
    hess = np.tensordot(w, modes.hessians, axes=1) if modes.m else np.zeros((d, d, grid.size))
    J = np.eye(d)[:, :, None] - hess
    det = _det2(J) if d == 2 else (J[0, 0] if d == 1 else np.linalg.det(np.moveaxis(J, -1, 0)))
    inv = GridVectorField.from_array(grid, (coords - disp).reshape((d,) + grid.shape))
    return MappingEvaluation(inv, J.reshape((d, d) + grid.shape), det.reshape(grid.shape))


class PointMapper:
    """Evaluates ``Phi^{-1}`` and ``D Phi^{-1}`` at fixed points (e.g. quadrature points)."""

    def __init__(self, modes: TransportModes, points: NDArray):
        self.modes = modes
        self.points = np.asarray(points, dtype=float)
        P = interpolation_matrix(modes.grid, self.points)
        d = modes.grid.dim
        m = modes.m
        # (m, d, n_pts) and (m, d, d, n_pts)
        n = len(self.points)
        self.grad = np.array([[P @ g for g in gm] for gm in modes.gradients]).reshape(m, d, n)
        self.hess = np.array([[[P @ h for h in row] for row in hm] for hm in modes.hessians]).reshape(m, d, d, n)

    def __call__(self, w) -> tuple[NDArray, NDArray]:
        """Mapped points ``(n, d)`` and Jacobians ``(n, d, d)``."""
        w = np.asarray(w, dtype=float).ravel()
        d = self.points.shape[1]
        if self.modes.m == 0:
            return self.points.copy(), np.broadcast_to(np.eye(d), (len(self.points), d, d)).copy()
        disp = np.tensordot(w, self.grad, axes=1).T
        J = np.eye(d)[None] - np.moveaxis(np.tensordot(w, self.hess, axes=1), -1, 0)
        return self.points - disp, J


def convexity_defect(modes: TransportModes, w) -> float:
    """Most negative per-axis second difference of ``|y|^2/2 - sum w xi`` over interior nodes."""
    grid = modes.grid
    phi = 0.5 * sum(c ** 2 for c in grid.mesh()) - modes.potential(w).reshape(grid.shape)
    worst = np.inf
    for k in range(grid.dim):
        if grid.shape[k] < 3:
            continue
        d2 = np.diff(phi, n=2, axis=k)
        sl = [slice(1, -1) if (j != k and grid.shape[j] >= 3) else slice(None) for j in range(grid.dim)]
        worst = min(worst, float(d2[tuple(sl)].min()))
    return worst


def _clamp(points: NDArray, grid: TensorGrid) -> NDArray:
    lo = np.array([a for a, _ in grid.domain])
    hi = np.array([b for _, b in grid.domain])
    return np.clip(points, lo, hi)


def invert_map(modes: TransportModes, w, eps_fine: float | None = None, polish: bool = True,
               newton_steps: int = 8) -> MappingEvaluation:
    """Forward map ``Phi = id - grad [sum w xi]^{c, eps_fine}`` with round-trip diagnostics.

    The soft c-transform is taken against uniform weights on the mode grid and
    ``eps_fine`` defaults to ``h^2 / 10``.  With ``polish`` a few Newton steps
    on ``Phi^{-1}(y) = x`` refine the c-transform estimate.
    """
    grid = modes.grid
    d = grid.dim
    h = min(grid.spacing)
    eps_fine = h * h / 10.0 if eps_fine is None else eps_fine
    mapping = build_inverse_map(modes, w)
    defect = convexity_defect(modes, w)
    mapping.convex = bool(defect >= -1e-12)
    if not mapping.convex:
        warnings.warn(f"potential not convex (second difference {defect:.3e}); inversion may fail",
                      ConvexityWarning, stacklevel=2)
    chi = modes.potential(w).reshape(grid.shape)
    op = GibbsOperator(grid, eps_fine, log_domain=True)
    log_mass = np.log(grid.weights())
    chi_c = op.softmin(chi, log_mass)
    coords = np.stack(grid.mesh()).reshape(d, -1)
    fwd = (coords - _grad(chi_c, grid).reshape(d, -1)).T
    fwd = _clamp(fwd, grid)
    x = grid.points()
    if polish and modes.m:
        fwd = _newton_polish(modes, w, x, fwd, newton_steps)
    back, _ = PointMapper(modes, fwd)(w)
    mapping.forward = GridVectorField.from_array(grid, fwd.T.reshape((d,) + grid.shape))
    mapping.roundtrip_error = float(np.max(np.abs(back - x)))
    mapping.meta.update(eps_fine=eps_fine, convexity_defect=defect, polished=bool(polish))
    return mapping


def _newton_polish(modes: TransportModes, w, targets: NDArray, start: NDArray, steps: int) -> NDArray:
    grid = modes.grid
    y = start.copy()
    best = y.copy()
    best_res = np.full(len(y), np.inf)
    for _ in range(steps):
        img, J = PointMapper(modes, y)(w)
        r = img - targets
        rn = np.max(np.abs(r), axis=1)
        better = rn < best_res
        best[better], best_res[better] = y[better], rn[better]
        try:
            dy = np.linalg.solve(J, r[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        y = _clamp(y - dy, grid)
    img, _ = PointMapper(modes, y)(w)
    rn = np.max(np.abs(img - targets), axis=1)
    better = rn < best_res
    best[better] = y[better]
    return best


@dataclass(frozen=True)
class BijectivityReport:
    min_det_inverse: float
    min_det_forward: float | None
    max_boundary_displacement: float
    roundtrip_error: float | None

    @property
    def invertible(self) -> bool:
        return self.min_det_inverse > 0 and (self.min_det_forward is None or self.min_det_forward > 0)

    def to_dict(self) -> dict:
        return {"min_det_inverse": self.min_det_inverse, "min_det_forward": self.min_det_forward,
                "max_boundary_displacement": self.max_boundary_displacement,
                "roundtrip_error": self.roundtrip_error, "invertible": self.invertible}


def bijectivity_report(mapping: MappingEvaluation) -> BijectivityReport:
    """Minimum determinants and the largest normal displacement of boundary nodes."""
    grid = mapping.grid
    inv = mapping.inverse.as_array()
    coords = np.stack(grid.mesh())
    disp = inv - coords
    worst = 0.0
    for k in range(grid.dim):
        for side in (0, -1):
            sl = [slice(None)] * grid.dim
            sl[k] = side
            worst = max(worst, float(np.max(np.abs(disp[k][tuple(sl)]))))
    min_fwd = None
    if mapping.forward is not None:
        fwd = mapping.forward.as_array()
        Jf = np.stack([_grad(fwd[a], grid) for a in range(grid.dim)])
        det_f = _det2(Jf) if grid.dim == 2 else Jf[0, 0]
        min_fwd = float(det_f.min())
    return BijectivityReport(mapping.min_det, min_fwd, worst, mapping.roundtrip_error)
