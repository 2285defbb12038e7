"""Optimization engines: LP, MILP, diagonal QP and bounded least squares."""

from flowctrl.optcore.lp import (
    INFEASIBLE,
    ITERATION_LIMIT,
    OPTIMAL,
    UNBOUNDED,
    LinearProgram,
    LPResult,
    lp_solve,
)
from flowctrl.optcore.lsq import (
    JacobianMismatchError,
    LeastSquaresProblem,
    LMResult,
    check_jacobian,
    fd_jacobian,
    lm_solve,
)
from flowctrl.optcore.milp import NODE_LIMIT, MILPResult, MixedIntegerProgram, milp_solve
from flowctrl.optcore.qp import QPIterationError, QPResult, QuadraticProgram, qp_solve

__all__ = [
    "INFEASIBLE", "ITERATION_LIMIT", "NODE_LIMIT", "OPTIMAL", "UNBOUNDED",
    "LinearProgram", "LPResult", "lp_solve",
    "MixedIntegerProgram", "MILPResult", "milp_solve",
    "QuadraticProgram", "QPResult", "QPIterationError", "qp_solve",
    "LeastSquaresProblem", "LMResult", "JacobianMismatchError", "check_jacobian",
    "fd_jacobian", "lm_solve",
]
