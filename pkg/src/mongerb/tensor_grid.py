"""Regular tensor grids in one and two dimensions and fields sampled on them.

Field values are stored as arrays of shape ``grid.shape`` with ``ij`` indexing,
so ``values[i, j]`` is the sample at ``(x_i, y_j)``.  Flattening for linear
algebra uses C order; the on-disk layout uses axis-0-fastest order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray


class GridMismatchError(ValueError):
    """Raised when fields living on different grids are combined."""


@dataclass(frozen=True)
class TensorGrid:
    """Uniform tensor grid including both endpoints of every axis.

    Attributes:
        nodes_per_axis: Node count along each axis.
        domain: Closed interval ``(a, b)`` per axis.
    """

    nodes_per_axis: tuple[int, ...]
    domain: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.nodes_per_axis) not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {len(self.nodes_per_axis)}")
        if len(self.domain) != len(self.nodes_per_axis):
            raise ValueError("domain needs one interval per axis")
        for n in self.nodes_per_axis:
            if n < 1:
                raise ValueError("every axis needs at least one node")
        for a, b in self.domain:
            if not b >= a:
                raise ValueError(f"reversed interval ({a}, {b})")

    @property
    def dim(self) -> int:
        return len(self.nodes_per_axis)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.nodes_per_axis)

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes_per_axis))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(
            (b - a) / (n - 1) if n > 1 else 0.0
            for n, (a, b) in zip(self.nodes_per_axis, self.domain)
        )

    def axis(self, k: int) -> NDArray[np.float64]:
        """Node coordinates along axis ``k``."""
        a, b = self.domain[k]
        n = self.nodes_per_axis[k]
        if n == 1:
            return np.array([a], dtype=float)
        return a + np.arange(n) * self.spacing[k]

    def axes(self) -> list[NDArray[np.float64]]:
        return [self.axis(k) for k in range(self.dim)]

    def mesh(self) -> list[NDArray[np.float64]]:
        """Coordinate arrays of shape ``self.shape``, one per axis."""
        return list(np.meshgrid(*self.axes(), indexing="ij"))

    def points(self) -> NDArray[np.float64]:
        """All nodes as an ``(N, dim)`` array in C order."""
        return np.stack([m.ravel() for m in self.mesh()], axis=1)

    def axis_weights(self, k: int) -> NDArray[np.float64]:
        n = self.nodes_per_axis[k]
        if n == 1:
            return np.ones(1)
        w = np.full(n, self.spacing[k])
        w[0] = w[-1] = 0.5 * self.spacing[k]
        return w

    def weights(self) -> NDArray[np.float64]:
        """Trapezoidal quadrature weights, shape ``self.shape``."""
        w = self.axis_weights(0)
        for k in range(1, self.dim):
            w = np.multiply.outer(w, self.axis_weights(k))
        return w

    def center_index(self) -> tuple[int, ...]:
        """Index of the node closest to the domain center."""
        idx = []
        for k in range(self.dim):
            a, b = self.domain[k]
            idx.append(int(np.argmin(np.abs(self.axis(k) - 0.5 * (a + b)))))
        return tuple(idx)

    def refine(self, factor: int) -> "TensorGrid":
        """Grid with ``factor`` times as many cells per axis, same domain."""
        return TensorGrid(tuple((n - 1) * factor + 1 for n in self.nodes_per_axis), self.domain)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "nodes_per_axis": list(self.nodes_per_axis),
                "domain": [list(d) for d in self.domain]}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorGrid":
        return cls(tuple(int(n) for n in d["nodes_per_axis"]),
                   tuple((float(a), float(b)) for a, b in d["domain"]))


def make_uniform_grid(dim: int, nodes_per_axis, domain=None) -> TensorGrid:
    """Build a uniform grid; node ``i`` along an axis sits at ``a + i*h``.

    ``nodes_per_axis`` and ``domain`` may be given once and are then repeated
    for every axis.  A single node per axis is accepted as the degenerate
    point grid (unit quadrature weight).
    """
    if dim not in (1, 2):
        raise ValueError(f"dimension must be 1 or 2, got {dim}")
    if np.isscalar(nodes_per_axis):
        nodes = (int(nodes_per_axis),) * dim
    else:
        nodes = tuple(int(n) for n in nodes_per_axis)
    if domain is None:
        dom = ((0.0, 1.0),) * dim
    else:
        dom_arr = np.asarray(domain, dtype=float)
        if dom_arr.ndim == 1:
            dom = (tuple(dom_arr),) * dim
        else:
            dom = tuple(tuple(d) for d in dom_arr)
    return TensorGrid(nodes, tuple((float(a), float(b)) for a, b in dom))


def _check_same_grid(a: TensorGrid, b: TensorGrid) -> None:
    if a != b:
        raise GridMismatchError(f"grid mismatch: {a} vs {b}")


@dataclass(frozen=True)
class GridField:
    """Real values at every node of a grid.  Immutable."""

    grid: TensorGrid
    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            if v.size != self.grid.size:
                raise ValueError(f"expected {self.grid.size} values, got {v.size}")
            v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def flat(self) -> NDArray[np.float64]:
        return self.values.ravel()

    def _binary(self, other, op):
        if isinstance(other, GridField):
            _check_same_grid(self.grid, other.grid)
            return GridField(self.grid, op(self.values, other.values))
        return GridField(self.grid, op(self.values, other))

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return self._binary(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return GridField(self.grid, -self.values)


@dataclass(frozen=True)
class GridDensity(GridField):
    """Nonnegative field with unit trapezoidal mass."""

    def __post_init__(self) -> None:
        super().__post_init__()
        if np.any(self.values < 0):
            raise ValueError("density values must be nonnegative")
        mass = float(np.sum(self.values * self.grid.weights()))
        if abs(mass - 1.0) > 1e-12:
            raise ValueError(f"density mass is {mass}, expected 1")

    def masses(self) -> NDArray[np.float64]:
        """Quadrature masses ``rho_i * w_i``; they sum to one."""
        return self.values * self.grid.weights()


@dataclass(frozen=True)
class GridVectorField:
    """One scalar component per spatial axis."""

    grid: TensorGrid
    components: tuple[GridField, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        comps = tuple(self.components)
        if len(comps) != self.grid.dim:
            raise ValueError(f"need {self.grid.dim} components, got {len(comps)}")
        for c in comps:
            _check_same_grid(self.grid, c.grid)
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_array(cls, grid: TensorGrid, arr: NDArray[np.float64]) -> "GridVectorField":
        return cls(grid, tuple(GridField(grid, a) for a in arr))

    def as_array(self) -> NDArray[np.float64]:
        """Stacked components, shape ``(dim, *grid.shape)``."""
        return np.stack([c.values for c in self.components])


def quadrature(f: GridField) -> float:
    """Trapezoidal integral over the grid."""
    return float(np.sum(f.values * f.grid.weights()))


def normalize_density(f: GridField, floor: float = 0.0) -> GridDensity:
    """Rescale to unit mass, optionally mixing in a uniform floor.

    With ``floor = s`` the result is ``(1 - s) f / int f + s`` renormalized.
    """
    if floor < 0 or floor >= 1:
        raise ValueError("floor must lie in [0, 1)")
    if np.any(f.values < 0):
        raise ValueError("density candidate has negative values")
    w = f.grid.weights()
    mass = float(np.sum(f.values * w))
    if not mass > 0:
        raise ValueError("cannot normalize a field with zero total mass")
    v = f.values / mass
    if floor > 0:
        v = (1.0 - floor) * v + floor
    v = v / np.sum(v * w)
    # one correction pass pulls the mass to unit within round-off
    v = v / np.sum(v * w)
    return GridDensity(f.grid, v)


def _gradient_axis(values: NDArray, h: float, axis: int) -> NDArray:
    v = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    n = v.shape[0]
    out = np.zeros_like(v)
    if n == 1:
        return np.moveaxis(out, 0, axis)
    if n == 2:
        out[:] = (v[1] - v[0]) / h
        return np.moveaxis(out, 0, axis)
    out[1:-1] = (v[2:] - v[:-2]) / (2 * h)
    # one-sided stencils written in differences so constants give exact zeros
    out[0] = (4 * (v[1] - v[0]) - (v[2] - v[0])) / (2 * h)
    out[-1] = ((v[-3] - v[-1]) - 4 * (v[-2] - v[-1])) / (2 * h)
    return np.moveaxis(out, 0, axis)


def gradient(f: GridField) -> GridVectorField:
    """Central differences inside, one-sided second-order at boundary nodes."""
    comps = [_gradient_axis(f.values, f.grid.spacing[k], k) for k in range(f.grid.dim)]
    return GridVectorField.from_array(f.grid, np.stack(comps))


def _second_difference(values: NDArray, h: float, axis: int, boundary_order: int = 2) -> NDArray:
    v = np.moveaxis(values, axis, 0)
    n = v.shape[0]
    out = np.zeros_like(v)
    if n < 3:
        return np.moveaxis(out, 0, axis)
    out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / h**2
    if n >= 4 and boundary_order >= 2:
        out[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h**2
        out[-1] = (2.0 * v[-1] - 5.0 * v[-2] + 4.0 * v[-3] - v[-4]) / h**2
    else:
        out[0] = out[1]
        out[-1] = out[-2]
    return np.moveaxis(out, 0, axis)


def hessian_array(values: NDArray, grid: TensorGrid, boundary_order: int = 2) -> NDArray[np.float64]:
    """Hessian of nodal values, shape ``(dim, dim, *grid.shape)``.

    ``boundary_order=1`` gives boundary nodes the pure second difference of
    their interior neighbour instead of the second-order extrapolation.
    """
    d = grid.dim
    h = grid.spacing
    out = np.empty((d, d) + grid.shape)
    for k in range(d):
        out[k, k] = _second_difference(values, h[k], k, boundary_order)
    if d == 2:
        # per-axis operators commute, so the mixed stencil is symmetric
        mixed = _gradient_axis(_gradient_axis(values, h[1], 1), h[0], 0)
        out[0, 1] = mixed
        out[1, 0] = mixed
    return out


def hessian(f: GridField) -> list[list[GridField]]:
    """Second derivatives as a ``dim x dim`` nested list of fields."""
    arr = hessian_array(f.values, f.grid)
    return [[GridField(f.grid, arr[k, l]) for l in range(f.grid.dim)] for k in range(f.grid.dim)]


def interpolation_matrix(grid: TensorGrid, points: NDArray[np.float64]) -> sp.csr_matrix:
    """Sparse multilinear interpolation operator from nodes to ``points``.

    Points outside the domain are clamped onto it.  Rows act on C-order
    flattened nodal values.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != grid.dim:
        raise ValueError(f"points must have {grid.dim} columns")
    m = pts.shape[0]
    idx_lo, frac = [], []
    for k in range(grid.dim):
        a, b = grid.domain[k]
        n = grid.nodes_per_axis[k]
        if n == 1:
            idx_lo.append(np.zeros(m, dtype=int))
            frac.append(np.zeros(m))
            continue
        s = (np.clip(pts[:, k], a, b) - a) / grid.spacing[k]
        i0 = np.minimum(np.floor(s).astype(int), n - 2)
        idx_lo.append(i0)
        frac.append(s - i0)
    rows, cols, vals = [], [], []
    for corner in range(2**grid.dim):
        w = np.ones(m)
        flat = np.zeros(m, dtype=int)
        for k in range(grid.dim):
            bit = (corner >> k) & 1
            if grid.nodes_per_axis[k] == 1 and bit:
                w = np.zeros(m)
                ik = idx_lo[k]
            else:
                ik = idx_lo[k] + bit
                w = w * (frac[k] if bit else 1.0 - frac[k])
            flat = flat * grid.nodes_per_axis[k] + ik
        rows.append(np.arange(m))
        cols.append(flat)
        vals.append(w)
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, grid.size),
    )
    mat.sum_duplicates()
    return mat


def interpolate(f: GridField, points: NDArray[np.float64]) -> NDArray[np.float64]:
    """Multilinear interpolation of ``f`` at arbitrary points (clamped)."""
    return interpolation_matrix(f.grid, points) @ f.flat()


def resample(f: GridField, target: TensorGrid) -> GridField:
    """Multilinear resampling onto another grid over the same domain."""
    if target.dim != f.grid.dim:
        raise GridMismatchError("resampling requires equal dimension")
    return GridField(target, interpolate(f, target.points()))


def field_header(grid: TensorGrid, extra: dict | None = None) -> dict:
    head = grid.to_dict()
    head["order"] = "axis0-fastest"
    if extra:
        head["config"] = extra
    return head


def write_field(path, f: GridField, fmt: str = "csv", extra: dict | None = None) -> None:
    """Serialize values axis-0 fastest with a JSON header.

    ``csv``: first line ``# {header}``, then one value per line.
    ``bin``: first line is the JSON header, then raw little-endian float64.
    """
    path = Path(path)
    head = json.dumps(field_header(f.grid, extra), sort_keys=True)
    data = f.values.ravel(order="F")
    if fmt == "csv":
        with open(path, "w") as fh:
            fh.write(f"# {head}\n")
            for v in data:
                fh.write(f"{v:.17g}\n")
    elif fmt == "bin":
        with open(path, "wb") as fh:
            fh.write(head.encode() + b"\n")
            fh.write(data.astype("<f8").tobytes())
    else:
        raise ValueError(f"unknown format {fmt!r}")


def read_field(path, fmt: str = "csv") -> GridField:
    path = Path(path)
    if fmt == "csv":
        with open(path) as fh:
            head = json.loads(fh.readline()[1:].strip())
            data = np.array([float(line) for line in fh if line.strip()])
    elif fmt == "bin":
        with open(path, "rb") as fh:
            head = json.loads(fh.readline().decode())
            data = np.frombuffer(fh.read(), dtype="<f8")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    grid = TensorGrid.from_dict(head)
    return GridField(grid, data.reshape(grid.shape, order="F"))
