"""Magnitude pruning, sparse and int8 serialization, and compression sweeps for small MLPs."""

from .estimator import PrunedMLPRegressor
from .exceptions import (
    ConfigurationError,
    FormatError,
    NumericError,
    PrunekitError,
    ShapeError,
    UsageError,
)
from .pruning import PruningSchedule

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "FormatError",
    "NumericError",
    "PrunedMLPRegressor",
    "PrunekitError",
    "PruningSchedule",
    "ShapeError",
    "UsageError",
]
