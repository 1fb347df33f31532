"""
Monte Carlo EM for the joint diffusion model.

E-step: joint latent trajectories are drawn by backward sampling through the
filtered beliefs.
M-step: the genetic optimizer maximizes the Monte Carlo average of the
complete-data log-likelihood plus the popularity-shrinkage prior. With
``profile_covariance`` the search runs over the diffusion block only and
W, V, Delta_o and sigma_o^2 are set to their conditional maximizers.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.config import PipelineConfig
from app.diffusion.genetic import GaConfig, genetic_optimize
from app.diffusion.model import (
    LOG_2PI,
    N_PARAMS,
    PARAM_NAMES,
    AdoptionSeries,
    DiffusionParams,
    HierPrior,
    LatentState,
    ParamLayout,
    SurCovariance,
    evaluate_log_map,
    filter_latent,
    log_prior_term,
    observe,
    state_transition,
    transform_params,
    untransform_params,
)
from app.errors import DataValidationError, NumericalError
from app.filtering import FilterOutput, UkfTuning, sample_trajectories

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-8
PRIOR_VAR_FLOOR = 1e-6


@dataclass
class McemConfig:
    iterations: int = 20
    samples: int = 50
    initial_cov: float = 1e-4
    min_days: int = 30
    literal: bool = False
    profile_covariance: bool = True
    tolerance_se: float = 2.0
    market_scale: float = 1.5
    ga: GaConfig = field(default_factory=lambda: GaConfig(generations=40))
    tuning: UkfTuning = field(default_factory=UkfTuning)
    fixed: Dict[str, float] = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_config(cls, config: PipelineConfig, **overrides) -> "McemConfig":
        m = config.mcem
        values = dict(
            iterations=m.iterations,
            samples=m.samples,
            initial_cov=m.initial_cov,
            min_days=m.min_days,
            literal=m.literal_transition,
            profile_covariance=m.profile_covariance,
            tolerance_se=m.tolerance_se,
            market_scale=m.market_scale,
            ga=GaConfig.from_settings(m.ga, seed=config.seed),
            tuning=UkfTuning(config.ukf.alpha, config.ukf.kappa, config.ukf.beta),
            seed=config.seed,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class FitMetrics:
    log_likelihood: float
    log_map: float
    n_obs: int
    mad: np.ndarray
    mse: np.ndarray
    objective_trace: List[float] = field(default_factory=list)
    objective_se: List[float] = field(default_factory=list)
    log_map_trace: List[float] = field(default_factory=list)
    converged: bool = True


@dataclass
class DiffusionFit:
    params: DiffusionParams
    cov: SurCovariance
    prior: HierPrior
    latent: LatentState
    fit: FitMetrics
    vector: np.ndarray
    predictions: np.ndarray


def default_center(data: AdoptionSeries, market_scale: float = 1.5) -> DiffusionParams:
    """Starting values of Van den Bulte-Joshi magnitude, market sizes from the final observation."""
    J = data.n_categories
    final = np.maximum(data.values[-1], 1.0)
    market = market_scale * final
    return DiffusionParams(
        p_inf=np.full(J, 0.025),
        q_inf=np.full(J, 1e-3),
        p_imm=np.full(J, 0.29),
        q_imm=np.full(J, 0.2),
        M_inf=market.copy(),
        M_imm=market.copy(),
        w=np.full(J, 0.5),
        theta=np.full(J, 0.044),
    )


def default_covariance(data: AdoptionSeries) -> SurCovariance:
    obs_var = np.maximum((0.01 * data.values[-1]) ** 2, 1.0)
    return SurCovariance(np.diag(np.repeat(0.1 * obs_var, 2)), obs_var)


def fit_shrinkage(phi: np.ndarray, popularity: np.ndarray) -> Tuple[np.ndarray, float]:
    """Conditional maximizers of (Delta_o, sigma_o^2) given transformed parameters."""
    pop = np.asarray(popularity, dtype=float)
    denom = float(pop @ pop)
    shrinkage = (pop @ phi) / denom if denom > 0 else np.zeros(N_PARAMS)
    resid = phi - np.outer(pop, shrinkage)
    return shrinkage, max(float(np.mean(resid ** 2)), PRIOR_VAR_FLOOR)


def default_prior(popularity: np.ndarray, data: AdoptionSeries, market_scale: float = 1.5) -> HierPrior:
    phi = transform_params(default_center(data, market_scale))
    shrinkage, prior_var = fit_shrinkage(phi, popularity)
    return HierPrior(shrinkage, max(prior_var, 1.0), popularity)


def prediction_errors(predicted: np.ndarray, observed: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-column mean absolute deviation and mean squared error."""
    err = np.asarray(observed, dtype=float) - np.asarray(predicted, dtype=float)
    if err.ndim == 1:
        err = err[:, None]
    return np.mean(np.abs(err), axis=0), np.mean(err ** 2, axis=0)


def forecast_metrics(
    data: AdoptionSeries,
    params: DiffusionParams,
    cov: SurCovariance,
    tuning: UkfTuning = UkfTuning(),
    initial_cov: float = 1e-4,
    literal: bool = False,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-step-ahead predictions against observations: (MAD, MSE, predictions)."""
    out, _ = filter_latent(data, params, cov, tuning, initial_cov, literal)
    mad, mse = prediction_errors(out.one_step_pred_means, data.values)
    return mad, mse, out.one_step_pred_means


def sample_latent(out: FilterOutput, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Draw (n_samples, T, L) joint latent paths by backward sampling, floored at zero."""
    return np.maximum(sample_trajectories(out, n_samples, rng), 0.0)


class ExpectedLogPosterior:
    """Monte Carlo complete-data log-posterior over fixed E-step samples."""

    def __init__(
        self,
        samples: np.ndarray,
        data: AdoptionSeries,
        layout: ParamLayout,
        popularity: np.ndarray,
        literal: bool = False,
        fixed: Optional[Dict[str, float]] = None,
    ):
        self.samples = samples
        self.obs = data.values
        self.layout = layout
        self.popularity = np.asarray(popularity, dtype=float)
        self.literal = literal
        self.fixed = {PARAM_NAMES.index(k): v for k, v in (fixed or {}).items()}

        S, T, L = samples.shape
        previous = np.concatenate([np.zeros((S, 1, L)), samples[:, :-1]], axis=1)
        self._prev = previous.reshape(S * T, L).T
        self._curr = samples.reshape(S * T, L).T

    def apply_fixed(self, phi: np.ndarray) -> np.ndarray:
        if not self.fixed:
            return phi
        phi = np.array(phi, dtype=float)
        fixed_params = untransform_params(phi)
        for k, value in self.fixed.items():
            getattr(fixed_params, PARAM_NAMES[k])[:] = value
        phi[:, list(self.fixed)] = transform_params(fixed_params)[:, list(self.fixed)]
        return phi

    def residuals(self, params: DiffusionParams) -> Tuple[np.ndarray, np.ndarray]:
        S, T, L = self.samples.shape
        c_inf, c_imm = state_transition(self._prev[0::2], self._prev[1::2], params, self.literal)
        pred = np.empty_like(self._prev)
        pred[0::2], pred[1::2] = c_inf, c_imm
        state_resid = (self._curr - pred).T.reshape(S, T, L)
        obs_pred = observe(self._curr[0::2], self._curr[1::2], params.theta).T.reshape(S, T, -1)
        obs_resid = self.obs[None] - obs_pred
        return state_resid, obs_resid

    def per_sample(self, params: DiffusionParams, cov: SurCovariance) -> np.ndarray:
        """Complete-data log-likelihood for each latent sample."""
        state_resid, obs_resid = self.residuals(params)
        S, T, L = state_resid.shape
        try:
            chol = np.linalg.cholesky(cov.W)
        except np.linalg.LinAlgError:
            return np.full(S, -np.inf)
        white = np.linalg.solve(chol, state_resid.reshape(S * T, L).T).T.reshape(S, T, L)
        logdet_w = 2.0 * float(np.sum(np.log(np.diag(chol))))
        state_ll = -0.5 * (T * (L * LOG_2PI + logdet_w) + np.sum(white ** 2, axis=(1, 2)))
        obs_ll = -0.5 * (
            T * np.sum(LOG_2PI + np.log(cov.V)) + np.sum(obs_resid ** 2 / cov.V, axis=(1, 2))
        )
        return state_ll + obs_ll

    def profile(self, phi: np.ndarray) -> Tuple[DiffusionParams, SurCovariance, HierPrior]:
        """Conditional maximizers of W, V, Delta_o and sigma_o^2 for a given diffusion block."""
        params = untransform_params(phi)
        state_resid, obs_resid = self.residuals(params)
        L = state_resid.shape[-1]
        flat = state_resid.reshape(-1, L)
        W = flat.T @ flat / flat.shape[0]
        W = 0.5 * (W + W.T) + (VAR_FLOOR + 1e-9 * np.trace(W) / L) * np.eye(L)
        V = np.maximum(np.mean(obs_resid.reshape(-1, obs_resid.shape[-1]) ** 2, axis=0), VAR_FLOOR)
        shrinkage, prior_var = fit_shrinkage(phi, self.popularity)
        return params, SurCovariance(W, V), HierPrior(shrinkage, prior_var, self.popularity)

    def evaluate(self, vec: np.ndarray) -> Tuple[float, float, np.ndarray]:
        """(objective, Monte Carlo standard error, full vector) for a full ParamVector."""
        phi = self.apply_fixed(self.layout.phi(vec))
        vec = self.layout.with_block(vec, "phi", phi)
        try:
            params, cov, prior = self.layout.unpack(vec, self.popularity)
        except (ValueError, np.linalg.LinAlgError):
            return -math.inf, math.inf, vec
        contributions = self.per_sample(params, cov)
        if not np.all(np.isfinite(contributions)):
            return -math.inf, math.inf, vec
        value = float(np.mean(contributions)) + log_prior_term(phi, prior)
        se = float(np.std(contributions, ddof=1) / math.sqrt(len(contributions))) if len(contributions) > 1 else 0.0
        return value, se, vec

    def assemble(self, phi_flat: np.ndarray) -> np.ndarray:
        phi = self.apply_fixed(np.asarray(phi_flat, dtype=float).reshape(self.layout.n_categories, N_PARAMS))
        params, cov, prior = self.profile(phi)
        return self.layout.pack(params, cov, prior)


class _ProfiledObjective:
    def __init__(self, target: ExpectedLogPosterior):
        self.target = target

    def __call__(self, phi_flat: np.ndarray) -> float:
        try:
            vec = self.target.assemble(phi_flat)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError):
            return -math.inf
        return self.target.evaluate(vec)[0]


class _FullObjective:
    def __init__(self, target: ExpectedLogPosterior):
        self.target = target

    def __call__(self, vec: np.ndarray) -> float:
        return self.target.evaluate(vec)[0]


def mcem_fit(data: AdoptionSeries, prior: HierPrior, cfg: McemConfig) -> DiffusionFit:
    """
    Estimate the joint diffusion model by UKF-within-MCEM with genetic M-steps.

    Args:
        data: Cumulative adopter series for all categories
        prior: Popularity shrinkage prior (its Delta_o and sigma_o^2 are starting values)
        cfg: Estimation settings

    Returns:
        DiffusionFit with the best log-MAP iterate, its filtered latent state and fit metrics
    """
    if data.n_days < cfg.min_days:
        raise DataValidationError(
            f"{data.n_days} days per category is below the identifiability floor of {cfg.min_days}; "
            "market sizes are not identified"
        )
    if prior.popularity.shape[0] != data.n_categories:
        raise DataValidationError(
            f"popularity has {prior.popularity.shape[0]} entries for {data.n_categories} categories"
        )

    J = data.n_categories
    layout = ParamLayout(J)
    popularity = prior.popularity
    center = default_center(data, cfg.market_scale)
    for name, value in cfg.fixed.items():
        getattr(center, name)[:] = value
    vec = layout.pack(center, default_covariance(data), prior)

    def score(v: np.ndarray) -> float:
        return evaluate_log_map(v, data, layout, popularity, cfg.tuning, cfg.initial_cov, cfg.literal).value

    best_vec, best_map = vec, score(vec)
    objective_trace: List[float] = []
    objective_se: List[float] = []
    map_trace: List[float] = [best_map]
    violations, converged = 0, True

    for it in range(cfg.iterations):
        params, cov, _ = layout.unpack(vec, popularity)
        try:
            out, _ = filter_latent(data, params, cov, cfg.tuning, cfg.initial_cov, cfg.literal)
        except (NumericalError, ValueError, np.linalg.LinAlgError) as e:
            logger.warning("MCEM iteration %d: E-step filter failed (%s); restarting from best iterate", it, e)
            vec = best_vec
            params, cov, _ = layout.unpack(vec, popularity)
            out, _ = filter_latent(data, params, cov, cfg.tuning, cfg.initial_cov, cfg.literal)

        rng = np.random.default_rng([cfg.seed, it])
        samples = sample_latent(out, cfg.samples, rng)
        target = ExpectedLogPosterior(samples, data, layout, popularity, cfg.literal, cfg.fixed)
        ga_cfg = replace(cfg.ga, seed=int(np.random.SeedSequence([cfg.seed, it]).generate_state(1)[0]))

        if cfg.profile_covariance:
            phi0 = layout.phi(vec).ravel()
            result = genetic_optimize(_ProfiledObjective(target), phi0, ga_cfg)
            vec = target.assemble(result.best)
        else:
            result = genetic_optimize(_FullObjective(target), vec, ga_cfg)
            vec = target.evaluate(result.best)[2]

        value, se, _ = target.evaluate(vec)
        if objective_trace:
            tolerance = cfg.tolerance_se * math.sqrt(se ** 2 + objective_se[-1] ** 2)
            violations = violations + 1 if value < objective_trace[-1] - tolerance else 0
            if violations >= 3:
                converged = False
                logger.warning("MCEM objective decreased beyond Monte Carlo tolerance for %d iterations", violations)
        objective_trace.append(value)
        objective_se.append(se)

        current = score(vec)
        map_trace.append(current)
        if current > best_map:
            best_vec, best_map = vec, current
        logger.info("MCEM iteration %d: objective %.4f (se %.4f), log-MAP %.4f", it, value, se, current)

    params, cov, fitted_prior = layout.unpack(best_vec, popularity)
    out, latent = filter_latent(data, params, cov, cfg.tuning, cfg.initial_cov, cfg.literal)
    mad, mse = prediction_errors(out.one_step_pred_means, data.values)
    metrics = FitMetrics(
        log_likelihood=out.log_likelihood,
        log_map=best_map,
        n_obs=int(data.values.size),
        mad=mad,
        mse=mse,
        objective_trace=objective_trace,
        objective_se=objective_se,
        log_map_trace=map_trace,
        converged=converged,
    )
    return DiffusionFit(params, cov, fitted_prior, latent, metrics, best_vec, out.one_step_pred_means)
