"""Bayesian nonparametric covariance regression.

Models a predictor-indexed covariance Sigma(x) = Theta xi(x) xi(x)' Theta'
+ Sigma_0 with Gaussian-process dictionary functions and a multiplicative
gamma shrinkage prior, fit by a fully conjugate blocked Gibbs sampler, with
matrix-discounting and homoscedastic baselines and model-checking utilities.
"""

__version__ = "0.1.0"

from .errors import CapacityError, CovRegError, DataFormatError, NumericalError
from .kernels import DEFAULT_NUGGET, GramMatrix, KernelParams, chol_psd, gram_matrix
from .model import (
    LATENT_MEAN,
    ZERO_MEAN,
    CovarianceTrajectory,
    Dataset,
    Hyperparameters,
    ModelState,
    ShrinkageState,
    induced_covariance,
    induced_mean,
    sample_prior,
    prior_generating_hyper,
    default_inference_hyper,
    simulate_from_prior_dataset,
    simulate_spline_covariance,
)
from .gibbs import (
    ChainConfig,
    PosteriorArchive,
    kappa_heuristic,
    run_chain,
)

__all__ = [
    "__version__",
    "CapacityError", "CovRegError", "DataFormatError", "NumericalError",
    "DEFAULT_NUGGET", "GramMatrix", "KernelParams", "chol_psd", "gram_matrix",
    "LATENT_MEAN", "ZERO_MEAN", "CovarianceTrajectory", "Dataset",
    "Hyperparameters", "ModelState", "ShrinkageState",
    "induced_covariance", "induced_mean", "sample_prior",
    "prior_generating_hyper", "default_inference_hyper",
    "simulate_from_prior_dataset", "simulate_spline_covariance",
    "ChainConfig", "PosteriorArchive", "kappa_heuristic", "run_chain",
]
