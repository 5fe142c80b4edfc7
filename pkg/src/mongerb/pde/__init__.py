"""High-fidelity discretizations and their reference-domain forms."""

from .fem import FemSpace, LinearSolveError, SparseSystem, assemble_stiffness, solve_dirichlet, solve_spd
from .mapped import (
    MappingError,
    QpMapping,
    assemble_mapped_rhs,
    assemble_mapped_stiffness,
    laplace_coefficient,
)
from .problems import (
    AdvectionOperator,
    AdvectionProblem,
    NewtonError,
    PoissonProblem,
    ShiftProblem,
    SnapshotSet,
    advection_sweep,
    implicit_midpoint_step,
    midpoint_newton,
    poisson_sweep,
    shift_sweep,
    snapshot_sweep,
)
