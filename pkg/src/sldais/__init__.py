"""Annealed importance sampling ELBO estimators with surrogate-guided
dynamics, built on a small reverse-mode autodiff tape, with exact
conjugate-Gaussian oracles for desk-scale verification."""

from .anneal import AnnealingState
from .dais import (
    DivergenceError,
    NoiseBundle,
    elbo_dais,
    elbo_ns_dais,
    elbo_parametric,
    elbo_sl_dais,
)
from .model import Dataset, ModelDensity
from .oracle import (
    GaussianMoments,
    aggregate_pseudo_posterior,
    exact_posterior,
    log_evidence,
    surrogate_bias_trace,
    surrogate_posterior,
)
from .sampling import batch_estimates
from .surrogate import SurrogateLikelihood
from .train import FinalReport, RunConfig, generate_synthetic, run_fit
from .vardist import FullRankNormal, MeanFieldNormal

__version__ = "0.1.0"

__all__ = [
    "AnnealingState",
    "Dataset",
    "DivergenceError",
    "FinalReport",
    "FullRankNormal",
    "GaussianMoments",
    "MeanFieldNormal",
    "ModelDensity",
    "NoiseBundle",
    "RunConfig",
    "SurrogateLikelihood",
    "aggregate_pseudo_posterior",
    "batch_estimates",
    "elbo_dais",
    "elbo_ns_dais",
    "elbo_parametric",
    "elbo_sl_dais",
    "exact_posterior",
    "generate_synthetic",
    "log_evidence",
    "surrogate_bias_trace",
    "run_fit",
    "surrogate_posterior",
]
