"""Latent time-shift joint mixed-effects models for multicohort longitudinal data.

The package fits multi-outcome linear mixed models augmented with a shared
per-subject time shift via dynamic Hamiltonian Monte Carlo, and provides
convergence diagnostics, information criteria (WAIC, PSIS-LOO, DIC), a
replicated simulation-study harness, trajectory prediction, and a CLI.
"""

from .model import (
    M1_UNIVARIATE,
    M2_MULTIVARIATE,
    Dataset,
    ModelConfig,
    Observation,
    ParameterLayout,
    ParameterSet,
    ValidationReport,
    layout,
    validate_dataset,
)
from .posterior import (
    DensityResult,
    LogDensity,
    from_unconstrained,
    log_likelihood,
    log_posterior_gradient,
    log_prior,
    to_unconstrained,
)

__version__ = "0.1.0"

__all__ = [
    "M1_UNIVARIATE",
    "M2_MULTIVARIATE",
    "Dataset",
    "DensityResult",
    "LogDensity",
    "ModelConfig",
    "Observation",
    "ParameterLayout",
    "ParameterSet",
    "ValidationReport",
    "__version__",
    "from_unconstrained",
    "layout",
    "log_likelihood",
    "log_posterior_gradient",
    "log_prior",
    "to_unconstrained",
    "validate_dataset",
]
