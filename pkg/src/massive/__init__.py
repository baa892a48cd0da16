"""Bayesian model averaging over spike-and-slab instrumental variable models."""

from massive.errors import (
    ApproximationError,
    DegenerateConstraintError,
    DegenerateInputError,
    HyperparameterError,
    InconsistentMomentsError,
    MassiveError,
    NoInitializationError,
    OptimizationError,
    ParseError,
    PreconditionError,
)
from massive.types import (
    Hyperparams,
    ModelIndicator,
    ScaledParams,
    SufficientStats,
    UnscaledParams,
    scale_params,
    unscale_params,
)

__version__ = "0.1.0"

__all__ = [
    "ApproximationError",
    "DegenerateConstraintError",
    "DegenerateInputError",
    "HyperparameterError",
    "InconsistentMomentsError",
    "MassiveError",
    "NoInitializationError",
    "OptimizationError",
    "ParseError",
    "PreconditionError",
    "Hyperparams",
    "ModelIndicator",
    "ScaledParams",
    "SufficientStats",
    "UnscaledParams",
    "scale_params",
    "unscale_params",
]
