"""
Two-segment (influentials / imitators) diffusion state-space model.

The joint state stacks every category's pair of cumulative adopter counts,
interleaved as [c_inf_1, c_imm_1, c_inf_2, c_imm_2, ...], so that a
category permutation acts on 2x2 blocks of the SUR covariance.
"""
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import expit, logit

from app.errors import InvalidCovarianceError, NumericalError
from app.filtering import GaussianBelief, SsModel, UkfTuning, ukf_filter

logger = logging.getLogger(__name__)

PARAM_NAMES = ("p_inf", "q_inf", "p_imm", "q_imm", "M_inf", "M_imm", "w", "theta")
N_PARAMS = len(PARAM_NAMES)
RATE_FLOOR = 1e-10
UNIT_EPS = 1e-12
LOG_MAP_FAILURE = -1e300
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class AdoptionSeries:
    """Observed cumulative adopters, one column per category, one row per day."""
    categories: List[int]
    days: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.days = np.asarray(self.days, dtype=int)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape != (self.days.shape[0], len(self.categories)):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"{self.days.shape[0]} days x {len(self.categories)} categories"
            )

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    @property
    def n_categories(self) -> int:
        return self.values.shape[1]

    def subset(self, columns: Sequence[int]) -> "AdoptionSeries":
        columns = list(columns)
        return AdoptionSeries([self.categories[c] for c in columns], self.days.copy(), self.values[:, columns])


@dataclass
class DiffusionParams:
    """Per-category diffusion parameters; every field is a length-J array."""
    p_inf: np.ndarray
    q_inf: np.ndarray
    p_imm: np.ndarray
    q_imm: np.ndarray
    M_inf: np.ndarray
    M_imm: np.ndarray
    w: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.atleast_1d(np.asarray(getattr(self, f.name), dtype=float)))
        sizes = {getattr(self, name).shape for name in PARAM_NAMES}
        if len(sizes) != 1:
            raise ValueError(f"diffusion parameter arrays differ in shape: {sizes}")

    @property
    def n_categories(self) -> int:
        return self.p_inf.shape[0]

    def validate(self) -> None:
        for name in ("p_inf", "q_inf", "p_imm", "q_imm"):
            rate = getattr(self, name)
            if not np.all(np.isfinite(rate)) or np.any(rate < 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if np.any(self.M_inf <= 0) or np.any(self.M_imm <= 0):
            raise ValueError("market sizes must be > 0")
        for name in ("w", "theta"):
            value = getattr(self, name)
            if np.any(value < 0) or np.any(value > 1):
                raise ValueError(f"{name} must lie in [0, 1]")

    def as_matrix(self) -> np.ndarray:
        return np.column_stack([getattr(self, name) for name in PARAM_NAMES])

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "DiffusionParams":
        matrix = np.atleast_2d(matrix)
        return cls(**{name: matrix[:, k] for k, name in enumerate(PARAM_NAMES)})

    def category(self, j: int) -> "DiffusionParams":
        return DiffusionParams(**{name: getattr(self, name)[[j]] for name in PARAM_NAMES})

    def subset(self, columns: Sequence[int]) -> "DiffusionParams":
        columns = list(columns)
        return DiffusionParams(**{name: getattr(self, name)[columns] for name in PARAM_NAMES})

    def records(self, categories: Sequence[int]) -> List[Dict[str, float]]:
        return [
            {"category_id": int(cat), **{name: float(getattr(self, name)[j]) for name in PARAM_NAMES}}
            for j, cat in enumerate(categories)
        ]


@dataclass
class SurCovariance:
    """Joint state noise W (2J x 2J) and per-category observation variances V."""
    W: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.V = np.atleast_1d(np.asarray(self.V, dtype=float))
        if self.W.shape != (2 * self.V.shape[0],) * 2:
            raise InvalidCovarianceError(f"W has shape {self.W.shape} for {self.V.shape[0]} categories")

    @classmethod
    def diagonal(cls, state_var: Sequence[float], obs_var: Sequence[float]) -> "SurCovariance":
        return cls(np.diag(np.asarray(state_var, dtype=float)), np.asarray(obs_var, dtype=float))


@dataclass
class HierPrior:
    """Popularity-shrinkage prior on the transformed per-category parameters."""
    shrinkage: np.ndarray
    prior_var: float
    popularity: np.ndarray

    def __post_init__(self):
        self.shrinkage = np.asarray(self.shrinkage, dtype=float).reshape(N_PARAMS)
        self.popularity = np.atleast_1d(np.asarray(self.popularity, dtype=float))
        if not self.prior_var > 0:
            raise ValueError(f"prior_var must be > 0, got {self.prior_var}")


@dataclass
class LatentState:
    """Filtered latent trajectories per category (days x categories)."""
    c_inf: np.ndarray
    c_imm: np.ndarray
    cov: np.ndarray
    categories: List[int] = field(default_factory=list)


def _broadcast(value: np.ndarray, like: np.ndarray) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    if like.ndim == 2 and value.ndim == 1:
        return value[:, None]
    return value


def state_transition(
    c_inf_prev: np.ndarray,
    c_imm_prev: np.ndarray,
    params: DiffusionParams,
    literal: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Advance cumulative influential / imitator counts by one day.

    Inputs are (J,) or (J, n) arrays; parameters broadcast over the trailing axis.
    With ``literal`` the carry-over term is dropped (c_t = hazard * remaining).
    """
    c_inf_prev = np.asarray(c_inf_prev, dtype=float)
    c_imm_prev = np.asarray(c_imm_prev, dtype=float)
    p_inf, q_inf, p_imm, q_imm, m_inf, m_imm, w = (
        _broadcast(getattr(params, name), c_inf_prev) for name in PARAM_NAMES[:7]
    )

    share_inf = c_inf_prev / m_inf
    share_imm = c_imm_prev / m_imm
    hazard_inf = p_inf + q_inf * share_inf
    hazard_imm = p_imm + q_imm * (w * share_inf + (1.0 - w) * share_imm)

    c_inf = hazard_inf * (m_inf - c_inf_prev)
    c_imm = hazard_imm * (m_imm - c_imm_prev)
    if not literal:
        c_inf = c_inf + c_inf_prev
        c_imm = c_imm + c_imm_prev

    return np.clip(c_inf, 0.0, m_inf), np.clip(c_imm, 0.0, m_imm)


def observe(c_inf: np.ndarray, c_imm: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Expected observed cumulative adopters: theta * c_inf + (1 - theta) * c_imm."""
    c_inf = np.asarray(c_inf, dtype=float)
    theta = _broadcast(theta, c_inf)
    return theta * c_inf + (1.0 - theta) * np.asarray(c_imm, dtype=float)


def deterministic_path(params: DiffusionParams, n_days: int, literal: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Noiseless latent trajectories from launch, shape (n_days, J) each."""
    J = params.n_categories
    c_inf, c_imm = np.zeros(J), np.zeros(J)
    inf_path, imm_path = np.empty((n_days, J)), np.empty((n_days, J))
    for t in range(n_days):
        c_inf, c_imm = state_transition(c_inf, c_imm, params, literal)
        inf_path[t], imm_path[t] = c_inf, c_imm
    return inf_path, imm_path


class _JointTransition:
    def __init__(self, params: DiffusionParams, literal: bool):
        self.params = params
        self.literal = literal

    def __call__(self, points: np.ndarray) -> np.ndarray:
        c_inf, c_imm = state_transition(points[0::2], points[1::2], self.params, self.literal)
        out = np.empty_like(points, dtype=float)
        out[0::2], out[1::2] = c_inf, c_imm
        return out


class _JointObservation:
    def __init__(self, theta: np.ndarray):
        self.theta = theta

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return observe(points[0::2], points[1::2], self.theta)


def build_joint_model(params: DiffusionParams, cov: SurCovariance, literal: bool = False) -> SsModel:
    """Stack all categories into one 2J-dimensional state-space model with full W."""
    J = params.n_categories
    if cov.V.shape[0] != J:
        raise InvalidCovarianceError(f"covariance has {cov.V.shape[0]} categories, params have {J}")
    if np.any(cov.V <= 0):
        raise InvalidCovarianceError("observation variances must be > 0")
    W = cov.W
    if not np.all(np.isfinite(W)):
        raise InvalidCovarianceError("W has non-finite entries")
    eig_min = np.linalg.eigvalsh(0.5 * (W + W.T))[0]
    if eig_min < -1e-8 * max(1.0, float(np.max(np.abs(W)))):
        raise InvalidCovarianceError(f"W is not PSD (min eigenvalue {eig_min:.3g})")

    return SsModel(
        state_dim=2 * J,
        obs_dim=J,
        transition=_JointTransition(params, literal),
        observation=_JointObservation(params.theta),
        process_cov=W,
        obs_cov=np.diag(cov.V),
    )


def initial_belief(n_categories: int, initial_cov: float = 1e-4) -> GaussianBelief:
    """Launch-day belief: zero adopters in both segments."""
    L = 2 * n_categories
    return GaussianBelief(np.zeros(L), initial_cov * np.eye(L))


# Parameter transforms

def transform_params(params: DiffusionParams) -> np.ndarray:
    """Map parameters to the unconstrained (J, 8) space (log rates, log M, logit w/theta)."""
    out = np.empty((params.n_categories, N_PARAMS))
    for k, name in enumerate(PARAM_NAMES[:4]):
        out[:, k] = np.log(np.maximum(getattr(params, name), RATE_FLOOR))
    out[:, 4] = np.log(params.M_inf)
    out[:, 5] = np.log(params.M_imm)
    out[:, 6] = logit(np.clip(params.w, UNIT_EPS, 1.0 - UNIT_EPS))
    out[:, 7] = logit(np.clip(params.theta, UNIT_EPS, 1.0 - UNIT_EPS))
    return out


def untransform_params(phi: np.ndarray) -> DiffusionParams:
    phi = np.atleast_2d(phi)
    values = {name: np.exp(phi[:, k]) for k, name in enumerate(PARAM_NAMES[:6])}
    values["w"] = expit(phi[:, 6])
    values["theta"] = expit(phi[:, 7])
    return DiffusionParams(**values)


@dataclass(frozen=True)
class ParamLayout:
    """
    Flat unconstrained parameter vector:

        [phi (8J) | Cholesky-log W (2J(2J+1)/2) | log V (J) | Delta_o (8) | log sigma_o^2 (1)]
    """
    n_categories: int

    @property
    def state_dim(self) -> int:
        return 2 * self.n_categories

    @property
    def slices(self) -> Dict[str, slice]:
        J, L = self.n_categories, self.state_dim
        sizes = [("phi", N_PARAMS * J), ("chol", L * (L + 1) // 2), ("log_v", J), ("shrinkage", N_PARAMS), ("log_prior_var", 1)]
        out, start = {}, 0
        for name, size in sizes:
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def size(self) -> int:
        return self.slices["log_prior_var"].stop

    def pack(self, params: DiffusionParams, cov: SurCovariance, prior: HierPrior) -> np.ndarray:
        if params.n_categories != self.n_categories:
            raise ValueError("parameter count does not match layout")
        s = self.slices
        vec = np.empty(self.size)
        vec[s["phi"]] = transform_params(params).ravel()
        vec[s["chol"]] = cholesky_log(cov.W)
        vec[s["log_v"]] = np.log(cov.V)
        vec[s["shrinkage"]] = prior.shrinkage
        vec[s["log_prior_var"]] = math.log(prior.prior_var)
        return vec

    def phi(self, vec: np.ndarray) -> np.ndarray:
        return np.asarray(vec)[self.slices["phi"]].reshape(self.n_categories, N_PARAMS)

    def unpack(self, vec: np.ndarray, popularity: np.ndarray) -> Tuple[DiffusionParams, SurCovariance, HierPrior]:
        vec = np.asarray(vec, dtype=float)
        s = self.slices
        params = untransform_params(self.phi(vec))
        cov = SurCovariance(cholesky_exp(vec[s["chol"]], self.state_dim), np.exp(vec[s["log_v"]]))
        prior = HierPrior(vec[s["shrinkage"]], float(np.exp(vec[s["log_prior_var"]][0])), popularity)
        return params, cov, prior

    def with_block(self, vec: np.ndarray, name: str, values: np.ndarray) -> np.ndarray:
        out = np.array(vec, dtype=float)
        out[self.slices[name]] = np.ravel(values)
        return out


def cholesky_log(W: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, diagonal in log space, flattened row-major over the lower triangle."""
    L = np.linalg.cholesky(W)
    rows, cols = np.tril_indices(W.shape[0])
    values = L[rows, cols].copy()
    diag = rows == cols
    values[diag] = np.log(values[diag])
    return values


def cholesky_exp(values: np.ndarray, dim: int) -> np.ndarray:
    rows, cols = np.tril_indices(dim)
    L = np.zeros((dim, dim))
    entries = np.array(values, dtype=float)
    diag = rows == cols
    entries[diag] = np.exp(entries[diag])
    L[rows, cols] = entries
    return L @ L.T


# MAP objective

def log_prior_term(phi: np.ndarray, prior: HierPrior) -> float:
    """Sum over categories of log N(phi_j - Delta_o * Pop_j | 0, sigma_o^2 I)."""
    resid = phi - np.outer(prior.popularity, prior.shrinkage)
    n = resid.size
    return float(-0.5 * n * (LOG_2PI + math.log(prior.prior_var)) - 0.5 * np.sum(resid ** 2) / prior.prior_var)


@dataclass
class MapValue:
    value: float
    log_likelihood: float
    log_prior: float
    ok: bool


def evaluate_log_map(
    vec: np.ndarray,
    data: AdoptionSeries,
    layout: ParamLayout,
    popularity: np.ndarray,
    tuning: UkfTuning = UkfTuning(),
    initial_cov: float = 1e-4,
    literal: bool = False,
) -> MapValue:
    """Filter log-likelihood of the joint model plus the popularity-shrinkage prior."""
    if data.n_categories != layout.n_categories:
        raise ValueError("data and layout disagree on the number of categories")
    try:
        params, cov, prior = layout.unpack(vec, popularity)
        model = build_joint_model(params, cov, literal)
        out = ukf_filter(data.values, model, tuning, initial_belief(layout.n_categories, initial_cov))
        loglik = out.log_likelihood
    except (NumericalError, ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
        logger.debug("log_map evaluation failed: %s", e)
        return MapValue(LOG_MAP_FAILURE, LOG_MAP_FAILURE, 0.0, False)

    if not math.isfinite(loglik):
        return MapValue(LOG_MAP_FAILURE, LOG_MAP_FAILURE, 0.0, False)
    prior_term = log_prior_term(layout.phi(vec), prior)
    return MapValue(loglik + prior_term, loglik, prior_term, True)


def log_map(
    vec: np.ndarray,
    data: AdoptionSeries,
    layout: ParamLayout,
    popularity: np.ndarray,
    tuning: UkfTuning = UkfTuning(),
    initial_cov: float = 1e-4,
    literal: bool = False,
) -> float:
    return evaluate_log_map(vec, data, layout, popularity, tuning, initial_cov, literal).value


class LogMapObjective:
    """Picklable log_map closure for parallel optimizer evaluation."""

    def __init__(self, data, layout, popularity, tuning=UkfTuning(), initial_cov=1e-4, literal=False):
        self.data = data
        self.layout = layout
        self.popularity = np.asarray(popularity, dtype=float)
        self.tuning = tuning
        self.initial_cov = initial_cov
        self.literal = literal

    def __call__(self, vec: np.ndarray) -> float:
        return log_map(vec, self.data, self.layout, self.popularity, self.tuning, self.initial_cov, self.literal)


def filter_latent(
    data: AdoptionSeries,
    params: DiffusionParams,
    cov: SurCovariance,
    tuning: UkfTuning = UkfTuning(),
    initial_cov: float = 1e-4,
    literal: bool = False,
):
    """Run the joint filter and split the result into per-segment trajectories."""
    model = build_joint_model(params, cov, literal)
    out = ukf_filter(data.values, model, tuning, initial_belief(params.n_categories, initial_cov))
    means = out.means
    latent = LatentState(means[:, 0::2], means[:, 1::2], out.covs, list(data.categories))
    return out, latent
