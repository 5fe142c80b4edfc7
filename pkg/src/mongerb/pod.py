"""Proper orthogonal decomposition from snapshot correlation matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

ZERO_RANK_RTOL = 1e-12


class EigenConvergenceError(RuntimeError):
    pass


def _round_robin(n: int) -> list[tuple[NDArray, NDArray]]:
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for k in range(m // 2):
            a, b = players[k], players[m - 1 - k]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=int), np.array(q, dtype=int)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(C: NDArray, rtol: float = 1e-12, max_sweeps: int = 100) -> tuple[NDArray, NDArray]:
    """Cyclic Jacobi rotations, disjoint pairs applied together per round.

    Stops once the off-diagonal Frobenius norm is at most ``rtol * ||C||_F``.
    Returns unsorted eigenvalues and eigenvectors (columns).
    """
    A = np.array(C, dtype=float)
    n = A.shape[0]
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V
    scale = np.linalg.norm(A)
    if scale == 0:
        return np.zeros(n), V
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(A.diagonal()))
        if off <= rtol * scale:
            return A.diagonal().copy(), V
        for p, q in rounds:
            apq = A[p, q]
            active = apq != 0
            theta = np.where(active, (A[q, q] - A[p, p]) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(1.0, theta))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t**2)
            s = t * c
            Ap, Aq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = c * Ap - s * Aq
            A[:, q] = s * Ap + c * Aq
            Ap, Aq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            Vp, Vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = c * Vp - s * Vq
            V[:, q] = s * Vp + c * Vq
    raise EigenConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")


AUTO_JACOBI_MAX = 200


def symmetric_eigendecomposition(C: NDArray, method: str = "jacobi") -> tuple[NDArray, NDArray]:
    """Eigenpairs sorted by decreasing eigenvalue with a deterministic sign.

    ``method`` is ``"jacobi"`` (hand-rolled), ``"lapack"`` (numpy ``eigh``) or
    ``"auto"`` (Jacobi up to ``AUTO_JACOBI_MAX`` rows, LAPACK beyond).
    Each eigenvector's largest-magnitude entry is made positive.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("need a square matrix")
    scale = max(np.abs(C).max(initial=0.0), 1e-300)
    if np.abs(C - C.T).max(initial=0.0) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    C = 0.5 * (C + C.T)
    if method == "auto":
        method = "jacobi" if len(C) <= AUTO_JACOBI_MAX else "lapack"
    if method == "jacobi":
        lam, V = jacobi_eigh(C)
    elif method == "lapack":
        lam, V = np.linalg.eigh(C)
    else:
        raise ValueError(f"unknown method {method!r}")
    order = np.argsort(-lam, kind="stable")
    lam, V = lam[order], V[:, order]
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return lam, V * signs


def energy(eigenvalues: NDArray, m: int) -> float:
    lam = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    total = lam.sum()
    return float(lam[:m].sum() / total) if total > 0 else 1.0


def retained_count(eigenvalues: NDArray, tau: float) -> int:
    """Smallest ``m`` with ``1 - E(m) < tau`` among numerically nonzero eigenvalues."""
    lam = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    rank = int(np.sum(lam > ZERO_RANK_RTOL * lam.max())) if lam.size and lam.max() > 0 else 0
    lam = np.where(lam > ZERO_RANK_RTOL * lam.max(initial=0.0), lam, 0.0)
    total = lam.sum()
    tail = total - np.cumsum(lam)
    for m in range(1, rank + 1):
        if tail[m - 1] / total < tau:
            return m
    return rank


@dataclass(frozen=True)
class PodBasis:
    """Eigen-data of a correlation matrix and the retained truncation.

    ``coefficients[i]`` holds ``lambda_i^{-1/2} v_i``: mode ``i`` is
    ``sum_j coefficients[i, j] * snapshot_j``.
    """

    eigenvalues: NDArray[np.float64]
    eigenvectors: NDArray[np.float64]
    n: int
    tau: float

    @property
    def coefficients(self) -> NDArray[np.float64]:
        lam = self.eigenvalues[: self.n]
        return (self.eigenvectors[:, : self.n] / np.sqrt(lam)).T

    def snapshot_coordinates(self) -> NDArray[np.float64]:
        """``sqrt(lambda_i) v_i``: coordinates of snapshot ``j`` are column ``j``."""
        lam = self.eigenvalues[: self.n]
        return (self.eigenvectors[:, : self.n] * np.sqrt(lam)).T

    def modes(self, snapshots: NDArray) -> NDArray[np.float64]:
        """Modes as rows, from snapshots stored as rows."""
        return self.coefficients @ np.asarray(snapshots).reshape(len(self.eigenvalues), -1)

    def truncate(self, n: int) -> "PodBasis":
        if not 1 <= n <= self.rank:
            raise ValueError(f"n must lie in [1, {self.rank}]")
        return PodBasis(self.eigenvalues, self.eigenvectors, n, self.tau)

    @property
    def rank(self) -> int:
        lam = self.eigenvalues
        return int(np.sum(lam > ZERO_RANK_RTOL * lam.max()))


def pod_from_correlation(C: NDArray, tau: float, method: str = "jacobi",
                         max_modes: int | None = None) -> PodBasis:
    """POD truncated by the retained-energy rule ``1 - E(m) < tau``."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    C = np.asarray(C, dtype=float)
    if not np.any(C):
        raise ValueError("correlation matrix is identically zero")
    lam, V = symmetric_eigendecomposition(C, method=method)
    lam = np.where(lam > ZERO_RANK_RTOL * lam.max(), lam, 0.0)
    n = retained_count(lam, tau)
    if max_modes is not None:
        n = min(n, max_modes)
    return PodBasis(lam, V, n, tau)


def correlation_matrix(snapshots: NDArray, inner: NDArray | None = None) -> NDArray[np.float64]:
    """Gram matrix of row snapshots under ``inner`` (identity if omitted)."""
    S = np.asarray(snapshots, dtype=float).reshape(len(snapshots), -1)
    G = S @ S.T if inner is None else S @ (inner @ S.T)
    return 0.5 * (G + G.T)


def write_spectrum(path, eigenvalues: NDArray, header: str | None = None) -> None:
    """Two-column ``index lambda`` text file."""
    with open(path, "w") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for i, lam in enumerate(eigenvalues, start=1):
            fh.write(f"{i} {lam:.17g}\n")
