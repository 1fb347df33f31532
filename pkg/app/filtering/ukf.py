"""
Unscented Kalman filter for additive-noise nonlinear state-space models.

    x_k = F(x_{k-1}) + v_k,   v_k ~ N(0, process_cov)
    y_k = H(x_k)     + e_k,   e_k ~ N(0, obs_cov)

Transition and observation maps act on column stacks: an (L, n) array of n
points in, an (L', n) array out. Linear maps written as ``A @ X`` therefore
work unchanged.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, pinvh

from app.errors import (
    DataValidationError,
    DegenerateCovarianceError,
    FilterStepError,
    InvalidCovarianceError,
    InvalidTuningError,
    SingularInnovationError,
)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
JITTER = 1e-10
INNOVATION_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)

PointMap = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class UkfTuning:
    """Scaled unscented transform parameters."""
    alpha: float = 1e-1
    kappa: float = 0.0
    beta: float = 2.0

    def lam(self, L: int) -> float:
        return self.alpha ** 2 * (L + self.kappa) - L


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))


@dataclass
class SsModel:
    """Nonlinear additive-noise state-space model."""
    state_dim: int
    obs_dim: int
    transition: PointMap
    observation: PointMap
    process_cov: np.ndarray
    obs_cov: np.ndarray

    def __post_init__(self):
        self.process_cov = np.atleast_2d(np.asarray(self.process_cov, dtype=float))
        self.obs_cov = np.atleast_2d(np.asarray(self.obs_cov, dtype=float))

        if self.process_cov.shape != (self.state_dim, self.state_dim):
            raise InvalidCovarianceError(
                f"process_cov has shape {self.process_cov.shape}, expected {(self.state_dim,) * 2}"
            )
        if self.obs_cov.shape != (self.obs_dim, self.obs_dim):
            raise InvalidCovarianceError(
                f"obs_cov has shape {self.obs_cov.shape}, expected {(self.obs_dim,) * 2}"
            )
        for name, cov in (("process_cov", self.process_cov), ("obs_cov", self.obs_cov)):
            if not np.all(np.isfinite(cov)):
                raise InvalidCovarianceError(f"{name} has non-finite entries")
            if np.max(np.abs(cov - cov.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.max(np.abs(cov))):
                raise InvalidCovarianceError(f"{name} is not symmetric")

        try:
            _cholesky_with_jitter(self.process_cov)
        except DegenerateCovarianceError as e:
            raise InvalidCovarianceError(f"process_cov is not PSD: {e}") from e


@dataclass
class FilterOutput:
    """Filtered trajectory plus prediction-error log-likelihood."""
    beliefs: List[GaussianBelief]
    one_step_pred_means: np.ndarray
    log_likelihood: float
    step_logliks: np.ndarray = field(default_factory=lambda: np.zeros(0))
    predictions: List[GaussianBelief] = field(default_factory=list)
    cross_covs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))

    @property
    def means(self) -> np.ndarray:
        return np.stack([b.mean for b in self.beliefs])

    @property
    def covs(self) -> np.ndarray:
        return np.stack([b.cov for b in self.beliefs])


def ukf_weights(tuning: UkfTuning, L: int) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance weights of the 2L+1 sigma points."""
    if L < 1:
        raise InvalidTuningError(f"state dimension must be >= 1, got {L}")
    if not tuning.alpha > 0:
        raise InvalidTuningError(f"alpha must be > 0, got {tuning.alpha}")

    lam = tuning.lam(L)
    if not math.isfinite(lam) or L + lam <= 0:
        raise InvalidTuningError(f"L + lambda must be positive and finite (L={L}, lambda={lam})")

    n = 2 * L + 1
    mean_weights = np.full(n, 1.0 / (2.0 * (L + lam)))
    cov_weights = mean_weights.copy()
    mean_weights[0] = lam / (L + lam)
    cov_weights[0] = lam / (L + lam) + (1.0 - tuning.alpha ** 2 + tuning.beta)
    return mean_weights, cov_weights


def _cholesky_with_jitter(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass

    scale = max(float(np.trace(cov)), 0.0)
    jitter = JITTER * (scale if scale > 0 else 1.0)
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError as e:
        raise DegenerateCovarianceError(f"Cholesky failed after jitter {jitter:.3g}") from e


def sigma_points(belief: GaussianBelief, tuning: UkfTuning) -> np.ndarray:
    """
    Draw the 2L+1 sigma points of a Gaussian belief.

    Returns:
        (L, 2L+1) array: column 0 is the mean, then mean +/- columns of sqrt((L+lambda)P)
    """
    mean, cov = belief.mean, belief.cov
    L = mean.shape[0]
    lam = tuning.lam(L)
    if not math.isfinite(lam) or L + lam <= 0:
        raise InvalidTuningError(f"L + lambda must be positive and finite (L={L}, lambda={lam})")

    points = np.repeat(mean[:, None], 2 * L + 1, axis=1)
    if not np.any(cov):
        return points

    root = _cholesky_with_jitter((L + lam) * cov)
    points[:, 1:L + 1] += root
    points[:, L + 1:] -= root
    return points


def _spread(points: np.ndarray, mean_weights: np.ndarray, cov_weights: np.ndarray):
    center = points @ mean_weights
    dev = points - center[:, None]
    return center, dev, (dev * cov_weights) @ dev.T


def _symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + cov.T)


@dataclass
class Prediction:
    """Time-update belief for x_k plus the cross-covariance Cov(x_{k-1}, x_k)."""
    belief: GaussianBelief
    cross_cov: np.ndarray


def ukf_predict(prior: GaussianBelief, model: SsModel, tuning: UkfTuning) -> Prediction:
    """Propagate a belief through the transition map."""
    wm, wc = ukf_weights(tuning, model.state_dim)
    points = sigma_points(prior, tuning)
    propagated = np.asarray(model.transition(points), dtype=float)
    x_pred, dev, p_pred = _spread(propagated, wm, wc)
    cross = ((points - prior.mean[:, None]) * wc) @ dev.T
    return Prediction(GaussianBelief(x_pred, _symmetrize(p_pred + model.process_cov)), cross)


def ukf_update(
    predicted: GaussianBelief,
    y_k: np.ndarray,
    model: SsModel,
    tuning: UkfTuning,
) -> Tuple[GaussianBelief, np.ndarray, float]:
    """Measurement update on sigma points redrawn from the predicted belief."""
    wm, wc = ukf_weights(tuning, model.state_dim)
    x_pred, p_pred = predicted.mean, predicted.cov
    redrawn = sigma_points(predicted, tuning)
    obs_points = np.asarray(model.observation(redrawn), dtype=float).reshape(model.obs_dim, -1)
    y_pred, dy, p_y = _spread(obs_points, wm, wc)
    p_y = _symmetrize(p_y + model.obs_cov)
    dx = redrawn - x_pred[:, None]
    p_xy = (dx * wc) @ dy.T

    if not np.all(np.isfinite(p_y)):
        raise SingularInnovationError("innovation covariance has non-finite entries")
    eigvals, eigvecs = np.linalg.eigh(p_y)
    if eigvals[0] < -1e-8 * max(1.0, abs(eigvals[-1])):
        raise SingularInnovationError(f"innovation covariance is indefinite (min eigenvalue {eigvals[0]:.3g})")
    eigvals = np.maximum(eigvals, INNOVATION_FLOOR)
    p_y_inv = (eigvecs / eigvals) @ eigvecs.T

    gain = p_xy @ p_y_inv
    resid = y_k - y_pred
    mean = x_pred + gain @ resid
    cov = _symmetrize(p_pred - gain @ p_y @ gain.T)

    white = eigvecs.T @ resid
    step_loglik = -0.5 * (
        model.obs_dim * LOG_2PI + float(np.sum(np.log(eigvals))) + float(np.sum(white ** 2 / eigvals))
    )
    return GaussianBelief(mean, cov), y_pred, step_loglik


def _check_dimensions(state_dim: int, obs_dim: int, model: SsModel) -> None:
    if state_dim != model.state_dim or obs_dim != model.obs_dim:
        raise DataValidationError(
            f"dimension mismatch: state {state_dim} vs {model.state_dim}, obs {obs_dim} vs {model.obs_dim}"
        )


def ukf_step(
    prior: GaussianBelief,
    y_k: np.ndarray,
    model: SsModel,
    tuning: UkfTuning,
) -> Tuple[GaussianBelief, np.ndarray, float]:
    """
    One time update plus measurement update.

    Returns:
        (posterior belief, predicted observation mean, Gaussian log-density of y_k)
    """
    y_k = np.asarray(y_k, dtype=float).reshape(-1)
    _check_dimensions(prior.mean.shape[0], y_k.shape[0], model)
    return ukf_update(ukf_predict(prior, model, tuning).belief, y_k, model, tuning)


def ukf_filter(
    series: Sequence,
    model: SsModel,
    tuning: UkfTuning,
    init: GaussianBelief,
) -> FilterOutput:
    """Run the filter over a (T, obs_dim) observation series."""
    obs = np.asarray(series, dtype=float)
    if obs.ndim == 1:
        obs = obs.reshape(-1, 1) if model.obs_dim == 1 else obs.reshape(1, -1)
    if obs.shape[0] == 0:
        raise DataValidationError("observation series is empty")
    _check_dimensions(init.mean.shape[0], obs.shape[1], model)

    beliefs: List[GaussianBelief] = []
    predictions: List[GaussianBelief] = []
    cross_covs = np.empty((obs.shape[0], model.state_dim, model.state_dim))
    preds = np.empty((obs.shape[0], model.obs_dim))
    logliks = np.empty(obs.shape[0])
    belief = init

    for t in range(obs.shape[0]):
        try:
            predicted = ukf_predict(belief, model, tuning)
            belief, preds[t], logliks[t] = ukf_update(predicted.belief, obs[t], model, tuning)
        except (DegenerateCovarianceError, SingularInnovationError, np.linalg.LinAlgError) as e:
            raise FilterStepError(t, e) from e
        beliefs.append(belief)
        predictions.append(predicted.belief)
        cross_covs[t] = predicted.cross_cov

    return FilterOutput(
        beliefs=beliefs,
        one_step_pred_means=preds,
        log_likelihood=float(np.sum(logliks)),
        step_logliks=logliks,
        predictions=predictions,
        cross_covs=cross_covs,
    )


def _psd_root(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(_symmetrize(cov))
        return vecs * np.sqrt(np.maximum(vals, 0.0))


def sample_trajectories(output: FilterOutput, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw joint state paths from the smoothing distribution by backward sampling.

    The last state comes from the final filtered belief; each earlier state is
    drawn from the filtered belief conditioned on the already drawn successor,
    using the unscented cross-covariance as the linearisation.

    Returns:
        (n_samples, T, L) array of trajectories
    """
    if not output.predictions:
        raise ValueError("filter output carries no predictions to sample from")
    means, covs = output.means, output.covs
    T, L = means.shape
    draws = np.empty((n_samples, T, L))
    draws[:, -1] = means[-1] + rng.standard_normal((n_samples, L)) @ _psd_root(covs[-1]).T

    for t in range(T - 2, -1, -1):
        predicted = output.predictions[t + 1]
        cross = output.cross_covs[t + 1]
        try:
            gain = cho_solve(cho_factor(predicted.cov), cross.T).T
        except np.linalg.LinAlgError:
            gain = cross @ pinvh(predicted.cov)
        cond_cov = _symmetrize(covs[t] - gain @ predicted.cov @ gain.T)
        cond_means = means[t] + (draws[:, t + 1] - predicted.mean) @ gain.T
        draws[:, t] = cond_means + rng.standard_normal((n_samples, L)) @ _psd_root(cond_cov).T
    return draws
