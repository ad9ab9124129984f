"""Weighted summary measures for ordinal trial outcomes with Bayesian PO/PPO models."""

__version__ = "0.1.0"

from .measures import (
    BreakpointEffects,
    SummaryMeasure,
    UndefinedEffectError,
    breakpoint_effects,
    summarize,
    true_log_summary,
    weights,
)
from .ppo import ModelConfig, PpoModel, PpoParams, TrialDataset
from .sampler import PosteriorDraws, SamplerConfig, sample

__all__ = [
    "BreakpointEffects",
    "ModelConfig",
    "PosteriorDraws",
    "PpoModel",
    "PpoParams",
    "SamplerConfig",
    "SummaryMeasure",
    "TrialDataset",
    "UndefinedEffectError",
    "breakpoint_effects",
    "sample",
    "summarize",
    "true_log_summary",
    "weights",
]
