from .ukf import (
    FilterOutput,
    GaussianBelief,
    SsModel,
    UkfTuning,
    sample_trajectories,
    sigma_points,
    ukf_filter,
    ukf_predict,
    ukf_step,
    ukf_update,
    ukf_weights,
)

__all__ = [
    "FilterOutput",
    "GaussianBelief",
    "SsModel",
    "UkfTuning",
    "sample_trajectories",
    "sigma_points",
    "ukf_filter",
    "ukf_predict",
    "ukf_step",
    "ukf_update",
    "ukf_weights",
]
