from .dpmixture import (
    DPMixtureState,
    MixtureDraw,
    alpha_bounds,
    component_posterior,
    gibbs_sweep,
    predictive_logpdf,
    stick_breaking,
    unique_cluster_pmf,
)
from .mnl import (
    ChoiceDesign,
    ChoicePanel,
    choice_prob,
    fractional_loglik,
    history_states,
    panel_loglik,
    utility,
)
from .sampler import ChoiceFit, fit_choice, mh_rw_unit_step

__all__ = [
    "ChoiceDesign",
    "ChoiceFit",
    "ChoicePanel",
    "DPMixtureState",
    "MixtureDraw",
    "alpha_bounds",
    "choice_prob",
    "component_posterior",
    "fit_choice",
    "fractional_loglik",
    "gibbs_sweep",
    "history_states",
    "mh_rw_unit_step",
    "panel_loglik",
    "predictive_logpdf",
    "stick_breaking",
    "unique_cluster_pmf",
    "utility",
]
