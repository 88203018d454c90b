"""Score-based parameter-instability tests for two-level linear mixed models."""

__version__ = "0.1.0"

from .data import (
    Dataset,
    FittedModel,
    ParamVector,
    cluster_views,
    from_arrays,
    validate_dataset,
)
from .estimator import FitOptions, fit_ml, profile_beta
from .instability import (
    FluctuationProcess,
    TestOptions,
    TestResult,
    fluctuation_process,
    sctest,
)
from .likelihood import build_kernel, dV_dsigma, fixed_effect_covariance, loglik
from .scores import (
    BoundaryError,
    casewise_scores,
    clusterwise_scores,
    expected_information,
    information_root_inverse,
    score_matrix,
)
from .simulation import Scenario, generate_dataset, run_power_study

__all__ = [
    "BoundaryError",
    "Dataset",
    "FitOptions",
    "FittedModel",
    "FluctuationProcess",
    "ParamVector",
    "Scenario",
    "TestOptions",
    "TestResult",
    "build_kernel",
    "casewise_scores",
    "cluster_views",
    "clusterwise_scores",
    "dV_dsigma",
    "expected_information",
    "fit_ml",
    "fixed_effect_covariance",
    "fluctuation_process",
    "from_arrays",
    "generate_dataset",
    "information_root_inverse",
    "loglik",
    "profile_beta",
    "run_power_study",
    "sctest",
    "score_matrix",
    "validate_dataset",
]
