"""Empirical interpolation: greedy points and functions from a set of modes.

Fields are flat vectors; a matrix-valued field is handled by stacking its
entries, so an interpolation point is one entry at one location.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .pod import PodBasis, correlation_matrix, pod_from_correlation
from .tensor_grid import GridField

log = logging.getLogger(__name__)

DEGENERATE_RTOL = 1e-12


class EimDegeneracyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EimBasis:
    """``functions`` is ``(Q, P)``; ``matrix[q, r] = functions[r, points[q]]`` (unit lower triangular)."""

    functions: NDArray[np.float64]
    points: NDArray[np.int64]
    matrix: NDArray[np.float64]
    pod: PodBasis | None = None

    @property
    def Q(self) -> int:
        return len(self.points)

    def interpolate(self, point_values: NDArray) -> NDArray:
        return eim_coefficients(self, point_values) @ self.functions

    def lebesgue_constant(self) -> float:
        """``max_y sum_q |l_q(y)|`` over the cardinal functions ``l = X^T B^{-1}``."""
        if self.Q == 0:
            return 0.0
        card = np.linalg.solve(self.matrix.T, self.functions)
        return float(np.max(np.sum(np.abs(card), axis=0)))


def _as_rows(modes) -> NDArray:
    if isinstance(modes, np.ndarray):
        return np.atleast_2d(np.asarray(modes, dtype=float))
    return np.array([m.flat() if isinstance(m, GridField) else np.ravel(m) for m in modes], dtype=float)


def forward_substitution(B: NDArray, v: NDArray) -> NDArray:
    """Solve ``B x = v`` for unit lower-triangular ``B``."""
    x = np.array(v, dtype=float)
    for q in range(len(x)):
        x[q] -= B[q, :q] @ x[:q]
    return x


def eim_construct(modes: Sequence[GridField] | NDArray, Q: int | None = None) -> EimBasis:
    """Greedy interpolation on the first ``Q`` modes (all when ``Q`` is ``None``).

    A mode whose residual peaks below ``1e-12`` times the mode scale is
    degenerate: construction stops there with a warning and ``Q`` shrinks.
    """
    Xi = _as_rows(modes)
    Q = len(Xi) if Q is None else min(Q, len(Xi))
    funcs: list[NDArray] = []
    points: list[int] = []
    B = np.zeros((Q, Q))
    for q in range(Q):
        xi = Xi[q]
        if q == 0:
            r = xi.copy()
        else:
            theta = forward_substitution(B[:q, :q], xi[points])
            r = xi - theta @ np.array(funcs)
        scale = max(np.max(np.abs(xi)), 1e-300)
        p = int(np.argmax(np.abs(r)))
        if abs(r[p]) < DEGENERATE_RTOL * scale:
            warnings.warn(f"EIM residual degenerate at q={q + 1}; keeping Q={q}",
                          EimDegeneracyWarning, stacklevel=2)
            B = B[:q, :q]
            break
        if p in points:
            raise RuntimeError("EIM selected a repeated point")
        x = r / r[p]
        funcs.append(x)
        points.append(p)
        for qq in range(q + 1):
            B[qq, q] = x[points[qq]]
            B[q, qq] = funcs[qq][p]
    Q = len(points)
    B = B[:Q, :Q]
    F = np.array(funcs) if funcs else np.zeros((0, Xi.shape[1]))
    # exact zeros above the diagonal and ones on it
    B = np.tril(B)
    np.fill_diagonal(B, 1.0)
    return EimBasis(F, np.array(points, dtype=np.int64), B)


def eim_coefficients(basis: EimBasis, point_values: NDArray) -> NDArray[np.float64]:
    """``theta`` with ``sum_r theta_r X_r(y_q) = point_values[q]`` for every point."""
    v = np.asarray(point_values, dtype=float).ravel()
    if v.shape != (basis.Q,):
        raise ValueError(f"expected {basis.Q} point values")
    return forward_substitution(basis.matrix, v)


def eim_reduced_tensor(basis: EimBasis, test_fields: NDArray, trial_fields: NDArray,
                       form: Callable[[NDArray], object]) -> NDArray[np.float64]:
    """``T[q] = test @ form(X_q) @ trial.T`` with basis functions as rows of ``test``/``trial``."""
    test = np.atleast_2d(np.asarray(test_fields, dtype=float))
    trial = np.atleast_2d(np.asarray(trial_fields, dtype=float))
    out = np.zeros((basis.Q, len(test), len(trial)))
    for q in range(basis.Q):
        A = form(basis.functions[q])
        out[q] = test @ (A @ trial.T)
    return out


def eim_from_snapshots(snapshots: NDArray, weights: NDArray | None, tau: float,
                       method: str = "jacobi", max_terms: int | None = None,
                       normalize: bool = False) -> EimBasis:
    """POD of coefficient snapshots (weighted L2), then greedy interpolation of the retained modes.

    ``normalize`` scales every snapshot to unit norm first, so a few
    large-amplitude fields cannot claim the whole energy budget.
    """
    S = np.atleast_2d(np.asarray(snapshots, dtype=float))
    if normalize:
        wts = np.ones(S.shape[1]) if weights is None else np.asarray(weights, dtype=float)
        norms = np.sqrt(np.einsum("ij,ij,j->i", S, S, wts))
        S = S / np.where(norms > 0, norms, 1.0)[:, None]
    if weights is None:
        C = correlation_matrix(S)
    else:
        C = correlation_matrix(S * np.sqrt(np.asarray(weights, dtype=float)))
    pod = pod_from_correlation(C, tau, method=method, max_modes=max_terms)
    modes = pod.modes(S)
    basis = eim_construct(modes)
    log.info("EIM: %d POD modes, Q=%d", pod.n, basis.Q)
    return EimBasis(basis.functions, basis.points, basis.matrix, pod)
