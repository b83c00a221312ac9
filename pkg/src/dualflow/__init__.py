"""Dual-continuum unsaturated flow: fine solver, multiscale spaces and
homogenization utilities on structured grids."""

from .errors import (
    DecompositionFailure,
    InsufficientData,
    PicardNonconvergence,
    SolverFailure,
)

__version__ = "0.1.0"

__all__ = [
    "DecompositionFailure",
    "InsufficientData",
    "PicardNonconvergence",
    "SolverFailure",
    "__version__",
]
