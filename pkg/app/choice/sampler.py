import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.stats import multivariate_normal
from tqdm import tqdm

from app.config import PipelineConfig
from app.errors import DataValidationError, NumericalError

from .dpmixture import DPMixtureState, MixtureDraw, alpha_bounds, gibbs_sweep, initial_state
from .mnl import (
    ChoiceDesign,
    ChoicePanel,
    ExactPooled,
    fractional_neg_hessians,
    loglik_all,
    pooling_weights,
    unit_modes,
)

logger = logging.getLogger(__name__)

# Sweeps per acceptance-rate batch when adapting the proposal scale
ADAPT_BATCH = 50


def _chol_with_jitter(matrix: np.ndarray, attempts: int = 6) -> Optional[np.ndarray]:
    matrix = 0.5 * (matrix + matrix.T)
    jitter = 0.0
    base = 1e-10 * max(float(np.trace(matrix)) / matrix.shape[0], 1e-300)
    for _ in range(attempts):
        try:
            return np.linalg.cholesky(matrix + jitter * np.eye(matrix.shape[0]))
        except np.linalg.LinAlgError:
            jitter = base if jitter == 0.0 else jitter * 100.0
    return None


def proposal_cholesky(neg_hessian: np.ndarray, prior_cov: np.ndarray) -> Tuple[np.ndarray, bool]:
    """
    Cholesky factor of Omega = (H + V^-1)^-1.

    Falls back to the prior covariance itself when H + V^-1 cannot be inverted.

    Returns:
        (factor, used_fallback)
    """
    try:
        precision = neg_hessian + np.linalg.inv(prior_cov)
        omega = np.linalg.inv(precision)
        if np.all(np.isfinite(omega)):
            chol = _chol_with_jitter(omega)
            if chol is not None:
                return chol, False
    except np.linalg.LinAlgError:
        pass
    chol = _chol_with_jitter(prior_cov)
    if chol is None:
        raise NumericalError("prior covariance is not positive definite")
    return chol, True


def mh_rw_unit_step(
    A_i: np.ndarray,
    mean: np.ndarray,
    cov: np.ndarray,
    delta: np.ndarray,
    z_i: np.ndarray,
    loglik: Callable[[np.ndarray], float],
    omega_chol: np.ndarray,
    s2: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, bool]:
    """
    Random-walk Metropolis update of one unit's coefficients.

    Proposal A' = A + sqrt(s2) * L e with L L' = Omega; the target is
    p(y_i | A) N(A | Delta z_i + mu, Sigma).
    """
    prior_mean = mean + delta @ np.atleast_1d(z_i)
    proposal = A_i + math.sqrt(s2) * omega_chol @ rng.standard_normal(A_i.shape[0])

    def log_target(A):
        return loglik(A) + multivariate_normal.logpdf(A, mean=prior_mean, cov=cov)

    log_ratio = log_target(proposal) - log_target(A_i)
    if math.log(rng.random()) < log_ratio:
        return proposal, True
    return A_i, False


def _prior_logpdf(A: np.ndarray, prior_means: np.ndarray, state: DPMixtureState) -> np.ndarray:
    out = np.empty(A.shape[0])
    for k in range(state.n_components):
        members = state.indicators == k
        if np.any(members):
            out[members] = multivariate_normal.logpdf(
                A[members] - prior_means[members], mean=np.zeros(state.dim), cov=state.covs[k]
            )
    return out


def mh_rw_sweep(
    A: np.ndarray,
    loglik: np.ndarray,
    state: DPMixtureState,
    covariates: np.ndarray,
    omega_chols: np.ndarray,
    s2: float,
    X: np.ndarray,
    Y: np.ndarray,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised unit-level step for every customer; units are independent given the mixture."""
    prior_means = state.means[state.indicators] + covariates @ state.delta.T
    noise = rng.standard_normal(A.shape)
    proposal = A + math.sqrt(s2) * np.einsum("ide,ie->id", omega_chols, noise)
    proposal_ll = loglik_all(proposal, X, Y)
    log_ratio = (
        proposal_ll + _prior_logpdf(proposal, prior_means, state)
        - loglik - _prior_logpdf(A, prior_means, state)
    )
    accept = np.log(rng.random(A.shape[0])) < log_ratio
    A = np.where(accept[:, None], proposal, A)
    return A, np.where(accept, proposal_ll, loglik), accept


@dataclass
class ChoiceFit:
    covariate: str
    param_names: List[str]
    customer_ids: np.ndarray
    draws: np.ndarray
    mixture: List[MixtureDraw]
    loglik_trace: np.ndarray
    acceptance_rate: float
    proposal_scale: float
    log_likelihood: float
    n_obs: int
    unit_modes: np.ndarray
    omega_fallbacks: int = 0
    component_trace: List[int] = field(default_factory=list)

    @property
    def posterior_mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def population_draws(self) -> np.ndarray:
        """Per-draw average of the customer coefficients, (draws, d)."""
        return self.draws.mean(axis=1)

    def delta_draws(self) -> np.ndarray:
        return np.array([m.delta for m in self.mixture])

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.param_names.index(name)]


def fit_choice(
    panel: ChoicePanel,
    design: ChoiceDesign,
    config: PipelineConfig,
    covariate: str = "local-imitators",
    seed: Optional[int] = None,
    progress: bool = False,
) -> ChoiceFit:
    """
    Estimate the mixture-of-normals MNL model by MCMC.

    Unit coefficients move by fractional-likelihood random-walk Metropolis; the
    mixture prior moves by one Gibbs sweep per iteration. The proposal scale is
    adapted towards the target acceptance rate during burn-in and frozen after.

    Args:
        panel: Customer choices and tenure
        design: Week-level covariates; ``design.social`` is None for the no-influence variant
        config: Run configuration (mcmc, dp and fraclik sections)
        covariate: Label of the social-influence measure in ``design``
        seed: Random seed (defaults to config.seed)
        progress: Show a progress bar

    Returns:
        ChoiceFit with thinned draws and the plug-in log-likelihood
    """
    if panel.n_customers == 0 or panel.n_weeks == 0:
        raise DataValidationError("choice panel is empty")
    if panel.n_categories != design.n_categories:
        raise DataValidationError(
            f"panel has {panel.n_categories} categories but covariates have {design.n_categories}"
        )

    mcmc, dp, w = config.mcmc, config.dp, config.fraclik.w
    seed = config.seed if seed is None else seed
    X = design.build(panel.history)
    Y = panel.choices
    Z = panel.standardized_tenure()
    I, d = panel.n_customers, design.dim

    pooled = ExactPooled(X, Y).maximize()
    weights = pooling_weights(np.full(I, panel.n_weeks))
    modes = unit_modes(X, Y, pooled, w, weights, ridge=1.0 / mcmc.mode_prior_var, n_jobs=config.ga.n_jobs)
    neg_hessians = fractional_neg_hessians(modes, X, Y, pooled, w, weights)

    alpha_range = alpha_bounds(I, dp.max_modal_clusters, law=dp.cluster_law)
    state = initial_state(modes, Z, math.sqrt(alpha_range[0] * alpha_range[1]), dp)
    A = modes.copy()
    loglik = loglik_all(A, X, Y)
    s2 = mcmc.proposal_scale if mcmc.proposal_scale is not None else 2.38 ** 2 / d
    logger.info("choice[%s]: %d customers, %d weeks, d=%d, alpha_d in [%.3g, %.3g]", covariate, I, panel.n_weeks, d, *alpha_range)

    total = mcmc.burn_in + mcmc.keep
    draws, mixture, trace, components = [], [], [], []
    omega_chols = np.zeros((I, d, d))
    fallbacks = 0
    batch_accepts = 0
    kept_accepts, kept_sweeps = 0, 0

    for sweep in tqdm(range(total), disable=not progress, desc=f"choice[{covariate}]"):
        if sweep % mcmc.hessian_rebuild == 0:
            rebuilt = 0
            for i in range(I):
                omega_chols[i], fell_back = proposal_cholesky(neg_hessians[i], state.covs[state.indicators[i]])
                rebuilt += fell_back
            if rebuilt:
                logger.warning("sweep %d: proposal fell back to the prior covariance for %d customers", sweep, rebuilt)
            fallbacks += rebuilt

        A, loglik, accepted = mh_rw_sweep(
            A, loglik, state, Z, omega_chols, s2, X, Y, np.random.default_rng([seed, sweep, 0])
        )
        state = gibbs_sweep(
            state, A, Z, dp, alpha_range, np.random.default_rng([seed, sweep, 1]), mcmc.max_components
        )

        total_ll = float(np.sum(loglik))
        if not math.isfinite(total_ll):
            raise NumericalError(f"non-finite choice log-likelihood at sweep {sweep}")
        trace.append(total_ll)
        components.append(state.n_components)

        if sweep < mcmc.burn_in:
            batch_accepts += int(np.sum(accepted))
            if (sweep + 1) % ADAPT_BATCH == 0:
                rate = batch_accepts / (ADAPT_BATCH * I)
                s2 *= math.exp(rate - mcmc.target_accept)
                batch_accepts = 0
        else:
            kept_accepts += int(np.sum(accepted))
            kept_sweeps += 1
            if (sweep - mcmc.burn_in + 1) % mcmc.thin == 0:
                draws.append(A.copy())
                mixture.append(MixtureDraw.from_state(state))

    if not draws:
        draws.append(A.copy())
        mixture.append(MixtureDraw.from_state(state))
    draws = np.array(draws)
    plug_in = float(np.sum(loglik_all(draws.mean(axis=0), X, Y)))
    acceptance = kept_accepts / max(kept_sweeps * I, 1)
    logger.info("choice[%s]: acceptance %.3f, s2 %.4g, log-lik %.3f, K last %d", covariate, acceptance, s2, plug_in, state.n_components)

    return ChoiceFit(
        covariate=covariate,
        param_names=design.param_names,
        customer_ids=panel.customer_ids.copy(),
        draws=draws,
        mixture=mixture,
        loglik_trace=np.array(trace),
        acceptance_rate=acceptance,
        proposal_scale=s2,
        log_likelihood=plug_in,
        n_obs=panel.n_obs,
        unit_modes=modes,
        omega_fallbacks=fallbacks,
        component_trace=components,
    )
