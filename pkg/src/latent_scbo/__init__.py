"""Trust-region constrained Bayesian optimisation with latent constraint surrogates."""

from .dataset import BoundsSpec, Dataset, best_feasible, lhs_sample
from .gp import GPHyperparameters, GPModel, fit, fit_batch, posterior, sample_posterior
from .latent import LatentProjection, kpca_fit, pca_fit, subspace_error
from .optimizer import OptimizerConfig, RunRecord, ks_aggregate, run, run_repeats
from .problems import Problem, SyntheticTailoringConfig, make_synthetic_tailoring, registry
from .trust_region import TrustRegionConfig, TrustRegionState, tr_bounds, tr_update

__version__ = "0.1.0"

__all__ = [
    "BoundsSpec",
    "Dataset",
    "GPHyperparameters",
    "GPModel",
    "LatentProjection",
    "OptimizerConfig",
    "Problem",
    "RunRecord",
    "SyntheticTailoringConfig",
    "TrustRegionConfig",
    "TrustRegionState",
    "best_feasible",
    "fit",
    "fit_batch",
    "kpca_fit",
    "ks_aggregate",
    "lhs_sample",
    "make_synthetic_tailoring",
    "pca_fit",
    "posterior",
    "registry",
    "run",
    "run_repeats",
    "sample_posterior",
    "subspace_error",
    "tr_bounds",
    "tr_update",
]
