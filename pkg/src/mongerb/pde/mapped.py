"""Reference-domain forms for a mapping given at quadrature points.

With ``x = Phi^{-1}(y)`` and ``J = D Phi^{-1}``, the Laplace form pulls back to
``int grad phi_i . K grad phi_j`` with ``K = J^{-1} J^{-T} |det J|`` and loads
pull back with the factor ``det J``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from .fem import FemSpace


class MappingError(ValueError):
    """The mapping is not orientation preserving at some quadrature point."""


@dataclass(frozen=True)
class QpMapping:
    """``Phi^{-1}`` and its Jacobian sampled at the quadrature points of a space."""

    points: NDArray[np.float64]
    jac: NDArray[np.float64]

    @property
    def det(self) -> NDArray[np.float64]:
        J = self.jac
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    @classmethod
    def identity(cls, space: FemSpace) -> "QpMapping":
        return cls(space.qp.copy(), np.broadcast_to(np.eye(2), (space.n_qp, 2, 2)).copy())


def inverse_2x2(J: NDArray) -> NDArray:
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1]
    inv[:, 1, 1] = J[:, 0, 0]
    inv[:, 0, 1] = -J[:, 0, 1]
    inv[:, 1, 0] = -J[:, 1, 0]
    return inv / det[:, None, None]


def laplace_coefficient(jac: NDArray) -> NDArray:
    """``J^{-1} J^{-T} |det J|`` per point."""
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv = inverse_2x2(jac)
    return np.einsum("qik,qjk->qij", inv, inv) * np.abs(det)[:, None, None]


def check_orientation(space: FemSpace, mapping: QpMapping) -> None:
    det = mapping.det
    bad = np.flatnonzero(det <= 0)
    if bad.size:
        q = bad[np.argmin(det[bad])]
        raise MappingError(f"nonpositive mapping determinant {det[q]:.3e} at quadrature point "
                           f"{q} (y = {space.qp[q, 0]:.4f}, {space.qp[q, 1]:.4f})")


def assemble_mapped_stiffness(space: FemSpace, mapping: QpMapping | None = None,
                              coefficient: NDArray | None = None) -> sp.csr_matrix:
    """Pulled-back Laplace form from a mapping, or from a precomputed coefficient field."""
    if coefficient is None:
        if mapping is None:
            return space.stiffness()
        check_orientation(space, mapping)
        coefficient = laplace_coefficient(mapping.jac)
    return space.stiffness(coefficient)


def assemble_mapped_rhs(space: FemSpace, f, mapping: QpMapping | None = None) -> NDArray:
    """``int phi_i f(Phi^{-1}(y)) det J dy``; ``f`` is a callable ``f(x, y)``."""
    if mapping is None:
        return space.load(f(space.qp[:, 0], space.qp[:, 1]))
    check_orientation(space, mapping)
    pts = mapping.points
    return space.load(f(pts[:, 0], pts[:, 1]) * mapping.det)
