"""Multi-period AC economic dispatch by reduced-space SQP, with nodal price decomposition."""
from .errors import (DispatchError, GridTooLarge, Infeasible, IslandingError, NoFeasiblePoint,
                     NonConvergence, NotConverged, NumericallySingular, ParseError, SingularJacobian,
                     SolvabilityBoundary, StepFailure, ValidationError)
from .netmodel import CaseModel, dumps_case, load_case, loads_case, validate_case
from .sqp import DispatchSolution, SolverOptions, solve_dispatch
from .pricing import NodalPrice, UnitEconomics, compute_lmps, equilibrium_check, marginal_profits
from .diagnostics import RegularityReport, regularity_report
from .kernels import IMPLEMENTATION as KERNELS

__version__ = "0.1.0"

__all__ = [
    "CaseModel", "load_case", "loads_case", "dumps_case", "validate_case",
    "SolverOptions", "DispatchSolution", "solve_dispatch",
    "NodalPrice", "UnitEconomics", "compute_lmps", "marginal_profits", "equilibrium_check",
    "RegularityReport", "regularity_report", "KERNELS",
    "DispatchError", "ParseError", "ValidationError", "IslandingError", "NonConvergence",
    "SingularJacobian", "NumericallySingular", "SolvabilityBoundary", "StepFailure",
    "Infeasible", "NotConverged", "GridTooLarge", "NoFeasiblePoint",
]
