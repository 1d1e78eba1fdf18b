"""Sparse portfolio selection by l1-regularized expected-utility maximization."""

from spo.errors import DataError, DomainError, NumericalError, ParameterError, SchemaError
from spo.utility import UtilitySpec
from spo.objective import PriceRelativeMatrix, ProblemSpec
from spo.solver import SolverConfig, SolveResult, PathResult, solve, solve_path, select_by_cardinality
from spo.portfolio import PortfolioWeights

__all__ = [
    "DataError",
    "DomainError",
    "NumericalError",
    "ParameterError",
    "SchemaError",
    "UtilitySpec",
    "PriceRelativeMatrix",
    "ProblemSpec",
    "SolverConfig",
    "SolveResult",
    "PathResult",
    "solve",
    "solve_path",
    "select_by_cardinality",
    "PortfolioWeights",
]

__version__ = "0.1.0"
