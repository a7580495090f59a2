"""Streamlined mean field variational Bayes for crossed random effects models."""

__version__ = "0.1.0"

from .errors import (
    CrossedMFVBError,
    DegenerateSampleError,
    DimensionGuardError,
    EmptyDataError,
    GridMismatchError,
    NotPositiveDefiniteError,
    ParseError,
    RankDeficientError,
    ShapeMismatchError,
    UnsupportedPriorError,
)
from .lsq import (
    LeastSquaresProblem,
    TwoLevelBlock,
    TwoLevelSolution,
    TwoLevelSystem,
    solve_least_squares,
    solve_two_level,
)

__all__ = [
    "__version__",
    "CrossedMFVBError",
    "DegenerateSampleError",
    "DimensionGuardError",
    "EmptyDataError",
    "GridMismatchError",
    "NotPositiveDefiniteError",
    "ParseError",
    "RankDeficientError",
    "ShapeMismatchError",
    "UnsupportedPriorError",
    "LeastSquaresProblem",
    "TwoLevelBlock",
    "TwoLevelSolution",
    "TwoLevelSystem",
    "solve_least_squares",
    "solve_two_level",
]
