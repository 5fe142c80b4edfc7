"""Bilinear finite elements on a uniform quadrilateral grid.

Every cell carries a 2x2 Gauss rule.  Quadrature points are numbered
``cell * 4 + q`` with cells in C order, so coefficient fields sampled at
quadrature points are flat vectors of length ``4 * n_cells``.  Bilinear and
linear forms are assembled through sparse point-evaluation operators:
``M_c = P^T diag(w c) P`` and similar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from ..tensor_grid import GridField, TensorGrid

_G = 0.5 / np.sqrt(3.0)
GAUSS_1D = np.array([0.5 - _G, 0.5 + _G])


class LinearSolveError(RuntimeError):
    pass


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: NDArray[np.float64]
    space: "FemSpace | None" = None


class FemSpace:
    """Q1 space on a 2D tensor grid with homogeneous Dirichlet dofs on the boundary.

    ``dirichlet=False`` keeps all nodes free (natural Neumann condition).
    """

    def __init__(self, grid: TensorGrid, dirichlet: bool = True):
        if grid.dim != 2:
            raise ValueError("FemSpace needs a 2D grid")
        self.grid = grid
        n0, n1 = grid.shape
        self.N = grid.size
        hx, hy = grid.spacing
        self.h = (hx, hy)
        i, j = np.meshgrid(np.arange(n0 - 1), np.arange(n1 - 1), indexing="ij")
        i, j = i.ravel(), j.ravel()
        # local order: (i,j), (i+1,j), (i+1,j+1), (i,j+1)
        self.cells = np.stack([i * n1 + j, (i + 1) * n1 + j, (i + 1) * n1 + j + 1, i * n1 + j + 1], axis=1)
        self.n_cells = len(self.cells)
        gx, gy = np.meshgrid(GAUSS_1D, GAUSS_1D, indexing="ij")
        gx, gy = gx.ravel(), gy.ravel()
        # reference shape functions and gradients at the 4 Gauss points
        self.phi = np.stack([(1 - gx) * (1 - gy), gx * (1 - gy), gx * gy, (1 - gx) * gy], axis=1)
        dphi_x = np.stack([-(1 - gy), (1 - gy), gy, -gy], axis=1) / hx
        dphi_y = np.stack([-(1 - gx), -gx, gx, (1 - gx)], axis=1) / hy
        self.dphi = np.stack([dphi_x, dphi_y], axis=-1)  # (q, a, dir)
        x0 = grid.axis(0)[i]
        y0 = grid.axis(1)[j]
        self.qp = np.stack([
            (x0[:, None] + gx[None, :] * hx).ravel(),
            (y0[:, None] + gy[None, :] * hy).ravel(),
        ], axis=1)
        self.n_qp = len(self.qp)
        self.qw = np.full(self.n_qp, 0.25 * hx * hy)
        rows = np.repeat(np.arange(self.n_qp), 4)
        cols = np.repeat(self.cells, 4, axis=0).ravel()
        tiled = lambda local: np.tile(local, (self.n_cells, 1)).ravel()
        self.P = sp.csr_matrix((tiled(self.phi), (rows, cols)), shape=(self.n_qp, self.N))
        self.Gx = sp.csr_matrix((tiled(self.dphi[..., 0]), (rows, cols)), shape=(self.n_qp, self.N))
        self.Gy = sp.csr_matrix((tiled(self.dphi[..., 1]), (rows, cols)), shape=(self.n_qp, self.N))
        boundary = np.zeros(grid.shape, dtype=bool)
        boundary[0, :] = boundary[-1, :] = boundary[:, 0] = boundary[:, -1] = True
        self.boundary = boundary.ravel()
        self.dirichlet = dirichlet
        self.free = ~self.boundary if dirichlet else np.ones(self.N, dtype=bool)
        self.free_idx = np.flatnonzero(self.free)

    # -- evaluation -------------------------------------------------------

    def values_at_qp(self, u: NDArray) -> NDArray:
        return self.P @ u

    def gradients_at_qp(self, u: NDArray) -> NDArray:
        return np.stack([self.Gx @ u, self.Gy @ u], axis=1)

    # -- assembly ---------------------------------------------------------

    def _weighted(self, c) -> sp.dia_matrix:
        c = np.broadcast_to(np.asarray(c, dtype=float), (self.n_qp,))
        return sp.diags(self.qw * c)

    def mass(self, coef=1.0) -> sp.csr_matrix:
        """``int c phi_i phi_j``."""
        return (self.P.T @ self._weighted(coef) @ self.P).tocsr()

    def stiffness(self, coef=None) -> sp.csr_matrix:
        """``int grad phi_i . K grad phi_j``; ``K`` scalar, per-qp scalar, or per-qp 2x2."""
        G = (self.Gx, self.Gy)
        if coef is None:
            coef = 1.0
        coef = np.asarray(coef, dtype=float)
        if coef.ndim == 3:
            out = sp.csr_matrix((self.N, self.N))
            for a in range(2):
                for b in range(2):
                    out = out + G[a].T @ self._weighted(coef[:, a, b]) @ G[b]
            return out.tocsr()
        W = self._weighted(coef)
        return (self.Gx.T @ W @ self.Gx + self.Gy.T @ W @ self.Gy).tocsr()

    def advection(self, b: NDArray) -> sp.csr_matrix:
        """``int phi_i (b . grad phi_j)`` with test index ``i``; ``b`` is ``(n_qp, 2)`` or ``(2,)``."""
        b = np.broadcast_to(np.asarray(b, dtype=float), (self.n_qp, 2))
        return (self.P.T @ (self._weighted(b[:, 0]) @ self.Gx + self._weighted(b[:, 1]) @ self.Gy)).tocsr()

    def load(self, f_qp) -> NDArray:
        """``int f phi_i`` from values at quadrature points."""
        f_qp = np.broadcast_to(np.asarray(f_qp, dtype=float), (self.n_qp,))
        return self.P.T @ (self.qw * f_qp)

    def l2_inner(self) -> sp.csr_matrix:
        return self.mass()

    def h1_inner(self) -> sp.csr_matrix:
        return (self.mass() + self.stiffness()).tocsr()

    # -- boundary handling ----------------------------------------------

    def _boundary_edges(self):
        """Per boundary edge Gauss point: cell, local shape values, normal derivative rows, weight."""
        if hasattr(self, "_edges"):
            return self._edges
        n0, n1 = self.grid.shape
        hx, hy = self.h
        cells, vals, dnorm, wts = [], [], [], []
        g = GAUSS_1D
        sides = [
            # (cell selector, local coords of the edge Gauss points, outward normal, edge length)
            (lambda i, j: j == 0, [(t, 0.0) for t in g], (0.0, -1.0), hx),
            (lambda i, j: j == n1 - 2, [(t, 1.0) for t in g], (0.0, 1.0), hx),
            (lambda i, j: i == 0, [(0.0, t) for t in g], (-1.0, 0.0), hy),
            (lambda i, j: i == n0 - 2, [(1.0, t) for t in g], (1.0, 0.0), hy),
        ]
        ci, cj = np.divmod(np.arange(self.n_cells), n1 - 1)
        for select, pts, normal, length in sides:
            on = np.flatnonzero(select(ci, cj))
            for gx, gy in pts:
                phi = np.array([(1 - gx) * (1 - gy), gx * (1 - gy), gx * gy, (1 - gx) * gy])
                dx = np.array([-(1 - gy), (1 - gy), gy, -gy]) / hx
                dy = np.array([-(1 - gx), -gx, gx, (1 - gx)]) / hy
                for c in on:
                    cells.append(c)
                    vals.append(phi)
                    dnorm.append(normal[0] * dx + normal[1] * dy)
                    wts.append(0.5 * length)
        self._edges = (np.array(cells, dtype=int), np.array(vals), np.array(dnorm), np.array(wts))
        return self._edges

    def boundary_flux(self) -> sp.csr_matrix:
        """``int_{boundary} (grad phi_j . n) phi_i`` with test index ``i``."""
        cells, vals, dnorm, wts = self._boundary_edges()
        dofs = self.cells[cells]
        rows = np.repeat(dofs, 4, axis=1).ravel()
        cols = np.tile(dofs, (1, 4)).ravel()
        data = (wts[:, None, None] * vals[:, :, None] * dnorm[:, None, :]).ravel()
        return sp.csr_matrix((data, (rows, cols)), shape=(self.N, self.N))

    def boundary_normal_derivative(self, u: NDArray) -> NDArray:
        """``grad u . n`` at every boundary-edge Gauss point."""
        cells, _, dnorm, _ = self._boundary_edges()
        return np.sum(dnorm * u[self.cells[cells]], axis=1)

    def restrict(self, A: sp.spmatrix) -> sp.csr_matrix:
        f = self.free_idx
        return sp.csr_matrix(A)[f][:, f]

    def extend(self, u_free: NDArray) -> NDArray:
        u = np.zeros(self.N)
        u[self.free_idx] = u_free
        return u

    def interpolate_function(self, fn) -> NDArray:
        """Nodal interpolant of ``fn(x, y)`` (boundary values kept as given)."""
        p = self.grid.points()
        return np.asarray(fn(p[:, 0], p[:, 1]), dtype=float)

    def to_field(self, u: NDArray) -> GridField:
        return GridField(self.grid, u)


def assemble_stiffness(space: FemSpace) -> sp.csr_matrix:
    return space.stiffness()


def solve_spd(A: sp.spmatrix, b: NDArray, rtol: float = 1e-10, x0: NDArray | None = None) -> NDArray:
    """Conjugate gradients to relative residual ``rtol``; at most ``10 n`` iterations."""
    n = A.shape[0]
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n)
    x, info = spla.cg(A, b, x0=x0, rtol=rtol, atol=0.0, maxiter=10 * n)
    if info != 0 or np.linalg.norm(b - A @ x) > 10 * rtol * bnorm:
        raise LinearSolveError(f"CG did not converge (info={info})")
    return x


def solve_dirichlet(system: SparseSystem) -> GridField | NDArray:
    """Solve the free-dof SPD system; returns a nodal field when the space is attached."""
    x = solve_spd(system.matrix, system.rhs)
    if system.space is None:
        return x
    return system.space.to_field(system.space.extend(x))
