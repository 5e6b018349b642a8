"""Bayesian bivariate and trivariate random-effects meta-analysis for
trial-level surrogate endpoint evaluation."""

from .data import (
    PUBLISHED_WITHIN_CORRELATIONS, OutcomeKind, StudyEffects, TherapyClass, WithinCorrelations,
    build_within_cov, compute_log_or, parse_study_csv,
)
from .model import HyperParams, McmcConfig, ModelSpec, ModelStructure, PriorSpec, between_cov
from .sampler import PosteriorChains, fit, initialize

__version__ = "0.1.0"

__all__ = [
    "PUBLISHED_WITHIN_CORRELATIONS", "OutcomeKind", "StudyEffects", "TherapyClass", "WithinCorrelations",
    "build_within_cov", "compute_log_or", "parse_study_csv",
    "HyperParams", "McmcConfig", "ModelSpec", "ModelStructure", "PriorSpec", "between_cov",
    "PosteriorChains", "fit", "initialize",
]
