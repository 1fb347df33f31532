import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp, multigammaln
from scipy.stats import invwishart, multivariate_normal, multivariate_t

from app.config import DpSettings
from app.errors import DataValidationError, DegenerateCovarianceError

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329


def stick_breaking(betas) -> np.ndarray:
    """
    Stick-breaking weights, truncated at len(betas).

    The unbroken remainder goes to the last atom, floored at zero, and the
    weights are renormalised so they sum to one.
    """
    betas = np.asarray(betas, dtype=float)
    if betas.ndim != 1 or betas.size == 0:
        raise ValueError("betas must be a non-empty 1-D sequence")
    if np.any((betas <= 0) | (betas >= 1)):
        raise ValueError("every stick-breaking fraction must lie in (0, 1)")
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - betas[:-1])])
    weights = betas * remaining
    weights[-1] = max(0.0, 1.0 - float(np.sum(weights[:-1])))
    return weights / weights.sum()


@lru_cache(maxsize=16)
def log_stirling_first(i: int) -> np.ndarray:
    """log |s(i, k)| for k = 1..i, unsigned Stirling numbers of the first kind."""
    row = np.zeros(1)
    for n in range(1, i):
        # |s(n+1, k)| = n |s(n, k)| + |s(n, k-1)|
        nxt = np.empty(n + 1)
        nxt[0] = math.log(n) + row[0]
        nxt[1:n] = np.logaddexp(math.log(n) + row[1:], row[:-1])
        nxt[n] = row[-1]
        row = nxt
    row.setflags(write=False)
    return row


def unique_cluster_log_pmf(alpha_d: float, i: int, law: str = "exact") -> np.ndarray:
    """
    Normalised log Pr(I* = k), k = 1..i, for the number of distinct values in i draws.

    ``exact`` uses the unsigned Stirling numbers of the first kind. ``approximate``
    replaces them with Gamma(i) / Gamma(k) * (gamma + ln i)^(k-1), which overstates
    the count once alpha_d grows past about one.
    """
    if alpha_d <= 0 or i < 1:
        raise ValueError(f"need alpha_d > 0 and i >= 1, got {alpha_d}, {i}")
    k = np.arange(1, i + 1)
    if law == "exact":
        log_terms = log_stirling_first(i) + k * math.log(alpha_d)
    elif law == "approximate":
        log_terms = (
            gammaln(i) - gammaln(k)
            + (k - 1) * math.log(EULER_GAMMA + math.log(i))
            + k * math.log(alpha_d)
            - gammaln(i + alpha_d)
        )
    else:
        raise ValueError(f"unknown cluster law {law!r}")
    return log_terms - logsumexp(log_terms)


def unique_cluster_pmf(alpha_d: float, i: int, law: str = "exact") -> np.ndarray:
    return np.exp(unique_cluster_log_pmf(alpha_d, i, law))


def modal_clusters(alpha_d: float, i: int, law: str = "exact") -> int:
    return int(np.argmax(unique_cluster_log_pmf(alpha_d, i, law))) + 1


def alpha_bounds(n_units: int, max_modal: int = 30, tol: float = 1e-6, law: str = "exact") -> Tuple[float, float]:
    """
    Concentration range whose modal cluster count spans [1, max_modal].

    The mode is non-decreasing in alpha, so each end is found by bisection on
    log alpha. The lower bound is half the point where the mode first leaves 1.
    """
    max_modal = min(max_modal, n_units)

    def first_alpha_with_mode(target: int) -> float:
        lo, hi = -30.0, 30.0
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if modal_clusters(math.exp(mid), n_units, law) >= target:
                hi = mid
            else:
                lo = mid
        return math.exp(hi)

    upper = first_alpha_with_mode(max_modal)
    lower = 0.5 * first_alpha_with_mode(2) if n_units > 1 else 0.5 * upper
    return lower, max(upper, lower * 2.0)


@dataclass
class NiwPosterior:
    """Normal-inverse-Wishart parameters: mu | Sigma ~ N(mean, Sigma / kappa), Sigma ~ IW(df, scale)."""
    mean: np.ndarray
    kappa: float
    df: float
    scale: np.ndarray


def base_scale(nu: float, vartheta: float, dim: int) -> np.ndarray:
    return nu * vartheta * np.eye(dim)


def component_posterior(residuals: np.ndarray, a: float, nu: float, scale: np.ndarray) -> NiwPosterior:
    """
    Conjugate update of the component base measure with prior mean zero.

    Args:
        residuals: (n, d) member coefficients minus their regression shift
        a: Prior precision multiplier of the mean
        nu: Prior inverse-Wishart degrees of freedom
        scale: Prior inverse-Wishart scale matrix
    """
    residuals = np.atleast_2d(residuals)
    d = scale.shape[0]
    n = residuals.shape[0] if residuals.size else 0
    if n == 0:
        return NiwPosterior(mean=np.zeros(d), kappa=a, df=nu, scale=scale.copy())
    xbar = residuals.mean(axis=0)
    centred = residuals - xbar
    scatter = centred.T @ centred
    post_scale = scale + scatter + (n * a / (n + a)) * np.outer(xbar, xbar)
    return NiwPosterior(
        mean=n * xbar / (n + a),
        kappa=n + a,
        df=nu + n,
        scale=0.5 * (post_scale + post_scale.T),
    )


def draw_niw(post: NiwPosterior, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    Sigma = np.atleast_2d(invwishart.rvs(df=post.df, scale=post.scale, random_state=rng))
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = rng.multivariate_normal(post.mean, Sigma / post.kappa)
    return mu, Sigma


def new_component_logpdf(residuals: np.ndarray, a: float, nu: float, scale: np.ndarray) -> np.ndarray:
    """Marginal log density of single residual vectors under the base measure (multivariate t)."""
    d = scale.shape[0]
    df = nu - d + 1.0
    shape = scale * (1.0 + a) / (a * df)
    return np.atleast_1d(multivariate_t.logpdf(residuals, loc=np.zeros(d), shape=shape, df=df))


def log_invwishart(logdet_sigma: np.ndarray, trace_inv: np.ndarray, nu: float, vartheta: float, d: int) -> float:
    """Sum of IW(Sigma_k | nu, nu * vartheta * I) log densities from per-component summaries."""
    c = nu * vartheta
    per = (
        0.5 * nu * d * math.log(c)
        - 0.5 * nu * d * math.log(2.0)
        - multigammaln(0.5 * nu, d)
        - 0.5 * (nu + d + 1.0) * logdet_sigma
        - 0.5 * c * trace_inv
    )
    return float(np.sum(per))


@dataclass
class DPMixtureState:
    indicators: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray
    delta: np.ndarray
    alpha_d: float
    a: float
    nu: float
    vartheta: float

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.indicators, minlength=self.n_components)

    def check(self) -> None:
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise DegenerateCovarianceError("mixture weights do not sum to one")
        if self.nu <= self.dim - 1:
            raise DegenerateCovarianceError(f"nu must exceed d - 1 = {self.dim - 1}, got {self.nu}")
        for k, Sigma in enumerate(self.covs):
            try:
                np.linalg.cholesky(Sigma)
            except np.linalg.LinAlgError as exc:
                raise DegenerateCovarianceError(f"component {k} covariance is not positive definite") from exc

    def copy(self) -> "DPMixtureState":
        return replace(
            self,
            indicators=self.indicators.copy(),
            means=self.means.copy(),
            covs=self.covs.copy(),
            weights=self.weights.copy(),
            delta=self.delta.copy(),
        )


def initial_state(
    coefficients: np.ndarray,
    covariates: np.ndarray,
    alpha_d: float,
    settings: DpSettings,
) -> DPMixtureState:
    """One component at the sample moments of ``coefficients``, hyperparameters at grid midpoints."""
    coefficients = np.atleast_2d(coefficients)
    I, d = coefficients.shape
    mean = coefficients.mean(axis=0)
    cov = np.cov(coefficients, rowvar=False) if I > 1 else np.eye(d)
    cov = np.atleast_2d(cov) + np.eye(d)
    return DPMixtureState(
        indicators=np.zeros(I, dtype=int),
        means=mean[None, :],
        covs=cov[None, :, :],
        weights=np.ones(1),
        delta=np.zeros((d, covariates.shape[1])),
        alpha_d=alpha_d,
        a=math.sqrt(settings.a_bounds[0] * settings.a_bounds[1]),
        nu=d - 1 + math.sqrt(settings.nu_offset_bounds[0] * settings.nu_offset_bounds[1]),
        vartheta=math.sqrt(settings.vartheta_bounds[0] * settings.vartheta_bounds[1]),
    )


def _component_logpdf(residuals: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    return np.atleast_1d(multivariate_normal.logpdf(residuals, mean=mean, cov=cov, allow_singular=False))


def _draw_categorical(log_weights: np.ndarray, rng: np.random.Generator) -> int:
    probs = np.exp(log_weights - logsumexp(log_weights))
    return int(rng.choice(probs.shape[0], p=probs / probs.sum()))


def _compact(indicators: np.ndarray, means: list, covs: list) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    used = np.unique(indicators)
    relabel = np.full(len(means), -1, dtype=int)
    relabel[used] = np.arange(used.shape[0])
    return relabel[indicators], np.array([means[k] for k in used]), np.array([covs[k] for k in used])


def draw_indicators(
    state: DPMixtureState,
    residuals: np.ndarray,
    rng: np.random.Generator,
    max_components: Optional[int] = None,
) -> DPMixtureState:
    """
    Polya-urn reassignment of every unit.

    Existing components are weighted by their leave-one-out count times the
    unit's density, a new one by alpha_d times the base-measure marginal. A new
    component's parameters are drawn from its one-unit posterior. Emptied
    components are removed at the end.
    """
    I, d = residuals.shape
    scale = base_scale(state.nu, state.vartheta, d)
    new_logpdf = new_component_logpdf(residuals, state.a, state.nu, scale)
    log_alpha = math.log(state.alpha_d)

    means = [m for m in state.means]
    covs = [c for c in state.covs]
    indicators = state.indicators.copy()
    counts = list(np.bincount(indicators, minlength=len(means)))
    dens = np.column_stack([_component_logpdf(residuals, m, c) for m, c in zip(means, covs)])

    for i in range(I):
        counts[indicators[i]] -= 1
        n = np.array(counts, dtype=float)
        with np.errstate(divide="ignore"):
            log_w = np.log(n) + dens[i]
        open_slot = max_components is None or int(np.sum(n > 0)) < max_components
        options = np.append(log_w, log_alpha + new_logpdf[i] if open_slot else -np.inf)
        choice = _draw_categorical(options, rng)
        if choice == len(means):
            post = component_posterior(residuals[i:i + 1], state.a, state.nu, scale)
            mu, Sigma = draw_niw(post, rng)
            means.append(mu)
            covs.append(Sigma)
            counts.append(0)
            dens = np.column_stack([dens, _component_logpdf(residuals, mu, Sigma)])
        indicators[i] = choice
        counts[choice] += 1

    indicators, means_arr, covs_arr = _compact(indicators, means, covs)
    return replace(state, indicators=indicators, means=means_arr, covs=covs_arr)


def draw_components(state: DPMixtureState, residuals: np.ndarray, rng: np.random.Generator) -> DPMixtureState:
    d = residuals.shape[1]
    scale = base_scale(state.nu, state.vartheta, d)
    means, covs = [], []
    for k in range(state.n_components):
        post = component_posterior(residuals[state.indicators == k], state.a, state.nu, scale)
        mu, Sigma = draw_niw(post, rng)
        means.append(mu)
        covs.append(Sigma)
    return replace(state, means=np.array(means), covs=np.array(covs))


def _griddy(log_density: np.ndarray, grid: np.ndarray, rng: np.random.Generator) -> float:
    return float(grid[_draw_categorical(log_density, rng)])


def log_grid(bounds: Tuple[float, float], size: int) -> np.ndarray:
    return np.geomspace(bounds[0], bounds[1], size)


def draw_hyperparameters(state: DPMixtureState, settings: DpSettings, rng: np.random.Generator) -> DPMixtureState:
    """Griddy-Gibbs updates of (a, nu, vartheta) given the current components."""
    d = state.dim
    K = state.n_components
    inv_covs = np.linalg.inv(state.covs)
    logdet = np.linalg.slogdet(state.covs)[1]
    trace_inv = np.trace(inv_covs, axis1=1, axis2=2)
    quad = np.einsum("kd,kde,ke->k", state.means, inv_covs, state.means)

    a_grid = log_grid(settings.a_bounds, settings.grid_size)
    log_a = 0.5 * d * K * np.log(a_grid) - 0.5 * a_grid * np.sum(quad)
    a = _griddy(log_a, a_grid, rng)

    nu_grid = d - 1 + log_grid(settings.nu_offset_bounds, settings.grid_size)
    log_nu = np.array([log_invwishart(logdet, trace_inv, nu, state.vartheta, d) for nu in nu_grid])
    nu = _griddy(log_nu, nu_grid, rng)

    v_grid = log_grid(settings.vartheta_bounds, settings.grid_size)
    log_v = np.array([log_invwishart(logdet, trace_inv, nu, v, d) for v in v_grid])
    vartheta = _griddy(log_v, v_grid, rng)

    return replace(state, a=a, nu=nu, vartheta=vartheta)


def draw_concentration(
    state: DPMixtureState,
    bounds: Tuple[float, float],
    settings: DpSettings,
    rng: np.random.Generator,
) -> DPMixtureState:
    """Griddy-Gibbs update of alpha_d: power prior on the bounds times Pr(I* = K | alpha_d)."""
    lo, hi = bounds
    n_units = state.indicators.shape[0]
    grid = np.linspace(lo, hi, settings.grid_size)
    with np.errstate(divide="ignore"):
        log_prior = settings.alpha_power * np.log1p(-(grid - lo) / (hi - lo))
    log_lik = np.array([unique_cluster_log_pmf(alpha, n_units, settings.cluster_law)[state.n_components - 1] for alpha in grid])
    return replace(state, alpha_d=_griddy(log_prior + log_lik, grid, rng))


def draw_delta(
    state: DPMixtureState,
    coefficients: np.ndarray,
    covariates: np.ndarray,
    prior_var: float,
    rng: np.random.Generator,
) -> DPMixtureState:
    """
    Conjugate Gaussian regression of (A_i - mu_{z_i}) on the unit covariates.

    Each unit carries the covariance of its own component; vec(Delta) is
    column-stacked with prior N(0, prior_var * I).
    """
    d = state.dim
    q = covariates.shape[1]
    if q == 0:
        return state
    targets = coefficients - state.means[state.indicators]
    precision = np.eye(d * q) / prior_var
    shift = np.zeros(d * q)
    inv_covs = np.linalg.inv(state.covs)
    for k in range(state.n_components):
        members = state.indicators == k
        if not np.any(members):
            continue
        Z_k = covariates[members]
        precision += np.kron(Z_k.T @ Z_k, inv_covs[k])
        shift += (inv_covs[k] @ targets[members].T @ Z_k).ravel(order="F")
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    vec = rng.multivariate_normal(cov @ shift, cov)
    return replace(state, delta=vec.reshape((d, q), order="F"))


def draw_weights(state: DPMixtureState, rng: np.random.Generator) -> DPMixtureState:
    weights = rng.dirichlet(state.counts.astype(float))
    return replace(state, weights=weights / weights.sum())


def gibbs_sweep(
    state: DPMixtureState,
    coefficients: np.ndarray,
    covariates: np.ndarray,
    settings: DpSettings,
    alpha_range: Tuple[float, float],
    rng: np.random.Generator,
    max_components: Optional[int] = None,
) -> DPMixtureState:
    """
    One full pass over the mixture-prior conditionals given the unit coefficients.

    Order: indicators, component parameters, (a, nu, vartheta), alpha_d, Delta,
    then the weights implied by the new partition.
    """
    coefficients = np.atleast_2d(coefficients)
    if coefficients.shape[0] == 0:
        raise DataValidationError("mixture update needs at least one unit")
    residuals = coefficients - covariates @ state.delta.T
    state = draw_indicators(state, residuals, rng, max_components)
    state = draw_components(state, residuals, rng)
    state = draw_hyperparameters(state, settings, rng)
    state = draw_concentration(state, alpha_range, settings, rng)
    state = draw_delta(state, coefficients, covariates, settings.delta_prior_var, rng)
    return draw_weights(state, rng)


def predictive_logpdf(state: DPMixtureState, coefficients: np.ndarray, covariate: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Posterior predictive log density of new unit coefficients.

    Polya-urn form: existing components with weight n_k / (alpha_d + I) and
    the base-measure marginal with weight alpha_d / (alpha_d + I). Invariant
    to component labels.
    """
    coefficients = np.atleast_2d(coefficients)
    d = state.dim
    shift = np.zeros(d) if covariate is None else state.delta @ np.asarray(covariate, float)
    residuals = coefficients - shift
    n_units = state.indicators.shape[0]
    counts = state.counts.astype(float)
    parts = [
        math.log(counts[k]) - math.log(state.alpha_d + n_units) + _component_logpdf(residuals, state.means[k], state.covs[k])
        for k in range(state.n_components) if counts[k] > 0
    ]
    parts.append(
        math.log(state.alpha_d) - math.log(state.alpha_d + n_units)
        + new_component_logpdf(residuals, state.a, state.nu, base_scale(state.nu, state.vartheta, d))
    )
    return logsumexp(np.vstack(parts), axis=0)


def coclustering_accuracy(true_labels: np.ndarray, indicators: np.ndarray) -> float:
    """Share of unit pairs whose same/different-cluster relation matches the truth."""
    true_labels = np.asarray(true_labels)
    indicators = np.asarray(indicators)
    same_true = true_labels[:, None] == true_labels[None, :]
    same_draw = indicators[:, None] == indicators[None, :]
    upper = np.triu_indices(true_labels.shape[0], k=1)
    return float(np.mean(same_true[upper] == same_draw[upper]))


@dataclass
class MixtureDraw:
    """Retained mixture state; summaries built from these are label-invariant."""
    indicators: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray
    delta: np.ndarray
    alpha_d: float
    a: float
    nu: float
    vartheta: float

    @classmethod
    def from_state(cls, state: DPMixtureState) -> "MixtureDraw":
        s = state.copy()
        return cls(s.indicators, s.means, s.covs, s.weights, s.delta, s.alpha_d, s.a, s.nu, s.vartheta)

    def to_state(self) -> DPMixtureState:
        return DPMixtureState(self.indicators, self.means, self.covs, self.weights, self.delta, self.alpha_d, self.a, self.nu, self.vartheta)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]
