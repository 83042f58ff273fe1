"""Differentially private Bayesian linear regression with noise-aware MCMC."""

from .baselines import IndConfig, run_mcmc_ind, run_naive, run_non_private
from .distributions import NiwParams, make_rng
from .gibbs import GibbsConfig, run_gibbs
from .model import Dataset, NigParams, PosteriorSamples, SuffStats, compute_suff_stats
from .moments import CovariateMoments
from .privacy import PrivacySpec, release_data_stats, release_fourth_moments

__version__ = "0.1.0"

__all__ = [
    "CovariateMoments",
    "Dataset",
    "GibbsConfig",
    "IndConfig",
    "NigParams",
    "NiwParams",
    "PosteriorSamples",
    "PrivacySpec",
    "SuffStats",
    "compute_suff_stats",
    "make_rng",
    "release_data_stats",
    "release_fourth_moments",
    "run_gibbs",
    "run_mcmc_ind",
    "run_naive",
    "run_non_private",
]
