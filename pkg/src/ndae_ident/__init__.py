"""Neural identification of index-1 differential-algebraic power-system models."""

from ndae_ident.errors import (
    DimensionMismatch,
    EmptyCloud,
    GridMismatch,
    IndexViolation,
    NdaeError,
    NoConvergence,
    NonFiniteLoss,
    NotHurwitz,
    NotPositiveDefinite,
    NotSymmetric,
    SingularMatrix,
    SolverError,
    TooFewPoints,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionMismatch",
    "EmptyCloud",
    "GridMismatch",
    "IndexViolation",
    "NdaeError",
    "NoConvergence",
    "NonFiniteLoss",
    "NotHurwitz",
    "NotPositiveDefinite",
    "NotSymmetric",
    "SingularMatrix",
    "SolverError",
    "TooFewPoints",
]
