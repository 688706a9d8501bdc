"""Bayesian inference of time-varying covariance matrices.

Latent GP paths drive a Wishart-distributed covariance process over a scalar
input (usually time). Posteriors come from blocked MCMC, tempered SMC, or
sparse variational inference; a DCC-GARCH baseline and covariance-dynamics
hypothesis tests round out the toolkit.
"""

__version__ = "0.1.0"

from .kernels import (  # noqa: F401
    Kernel,
    LocallyPeriodic,
    LogNormalPrior,
    Matern12,
    Periodic,
    Product,
    Rbf,
    Sum,
    kernel_from_json,
)
from .wishart import (  # noqa: F401
    EmaMean,
    LatentState,
    WishartModel,
    ZeroMean,
    log_likelihood,
    log_prior,
    predict,
    sample_prior_state,
    sigma_path,
)
