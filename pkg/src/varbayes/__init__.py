"""Variational Bayes toolkit: mean-field coordinate ascent, fixed-form
stochastic-gradient VB and Gaussian VB, with independent oracles."""

from varbayes.distributions import DistSpec, Kind, ParameterError
from varbayes.ffvb import FitResult, LbTrace, Strategy, TrainerConfig, run_ffvb
from varbayes.gvb import run_cholesky_gvb, run_nagvac
from varbayes.mfvb import (
    MfvbConfig,
    NormalModelHyper,
    fit_lasso_mfvb,
    fit_normal_mfvb,
)
from varbayes.models import ModelSpec

__version__ = "0.1.0"

__all__ = [
    "DistSpec",
    "FitResult",
    "Kind",
    "LbTrace",
    "MfvbConfig",
    "ModelSpec",
    "NormalModelHyper",
    "ParameterError",
    "Strategy",
    "TrainerConfig",
    "fit_lasso_mfvb",
    "fit_normal_mfvb",
    "run_cholesky_gvb",
    "run_ffvb",
    "run_nagvac",
]
