from .simulator import (
    MixtureSpec,
    ScenarioSpec,
    SimulatedData,
    draw_coefficients,
    simulate,
    simulate_choices,
    simulate_diffusion,
    simulate_features,
)

__all__ = [
    "MixtureSpec",
    "ScenarioSpec",
    "SimulatedData",
    "draw_coefficients",
    "simulate",
    "simulate_choices",
    "simulate_diffusion",
    "simulate_features",
]
