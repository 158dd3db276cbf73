"""Natural-gradient variational inference for mean-field Gaussian families."""

from .geometry import (
    CholeskyParams,
    DomainBox,
    DomainError,
    ExpectationParams,
    NaturalParams,
    StandardParams,
    to_expectation,
    to_standard,
)
from .models import Dataset, EstimatorConfig, GradientEstimate, LikelihoodModel
from .optimizers import OptimizerTrace, StepSchedule, run

__version__ = "0.1.0"

__all__ = [
    "CholeskyParams",
    "Dataset",
    "DomainBox",
    "DomainError",
    "EstimatorConfig",
    "ExpectationParams",
    "GradientEstimate",
    "LikelihoodModel",
    "NaturalParams",
    "OptimizerTrace",
    "StandardParams",
    "StepSchedule",
    "run",
    "to_expectation",
    "to_standard",
]
