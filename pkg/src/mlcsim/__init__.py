"""Two-level latent class simulation and provider-effect recovery toolkit."""

__version__ = "0.1.0"

from .em import EmConfig, FitResult, MlcParams, ModelSpec, fit
from .errors import (
    ConfigurationError,
    DegenerateFitError,
    FitError,
    MlcsimError,
    ParameterError,
    SimulationError,
    SummaryError,
)
from .estimator import MultilevelLatentClassRegression
from .recovery import RecoveredBeta, ols_slope, recover_beta, weighted_trust_outcome
from .simulate import (
    BinaryTrustCovariate,
    ContinuousTrustCovariate,
    CovariateModel,
    Dataset,
    GroundTruth,
    PatientBetas,
    SimConfig,
    simulate_dataset,
)

__all__ = [
    "BinaryTrustCovariate",
    "ConfigurationError",
    "ContinuousTrustCovariate",
    "CovariateModel",
    "Dataset",
    "DegenerateFitError",
    "EmConfig",
    "FitError",
    "FitResult",
    "GroundTruth",
    "MlcParams",
    "MlcsimError",
    "ModelSpec",
    "MultilevelLatentClassRegression",
    "ParameterError",
    "PatientBetas",
    "RecoveredBeta",
    "SimConfig",
    "SimulationError",
    "SummaryError",
    "fit",
    "ols_slope",
    "recover_beta",
    "simulate_dataset",
    "weighted_trust_outcome",
]
