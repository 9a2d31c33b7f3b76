"""Box-constrained NLP solver: PANOC inner loop with an ALM/PM outer loop."""

from .alm import alm_pm_solve
from .lbfgs import LBFGS, lbfgs_direction
from .panoc import panoc_solve, panoc_solve_compiled
from .problem import (
    BoxBounds,
    ConstraintMap,
    NlpProblem,
    NlpSolution,
    NumericalError,
    SolverConfig,
    SolverError,
    Status,
    project_box,
)

__all__ = [
    "BoxBounds", "ConstraintMap", "LBFGS", "NlpProblem", "NlpSolution", "NumericalError",
    "SolverConfig", "SolverError", "Status", "alm_pm_solve", "lbfgs_direction",
    "panoc_solve", "panoc_solve_compiled", "project_box",
]
