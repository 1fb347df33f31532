from .genetic import GaConfig, GaResult, genetic_optimize
from .mcem import DiffusionFit, FitMetrics, McemConfig, default_prior, forecast_metrics, mcem_fit
from .model import (
    AdoptionSeries,
    DiffusionParams,
    HierPrior,
    LatentState,
    ParamLayout,
    SurCovariance,
    build_joint_model,
    log_map,
    observe,
    state_transition,
)

__all__ = [
    "AdoptionSeries",
    "DiffusionFit",
    "DiffusionParams",
    "FitMetrics",
    "GaConfig",
    "GaResult",
    "HierPrior",
    "LatentState",
    "McemConfig",
    "ParamLayout",
    "SurCovariance",
    "build_joint_model",
    "default_prior",
    "forecast_metrics",
    "genetic_optimize",
    "log_map",
    "mcem_fit",
    "observe",
    "state_transition",
]
