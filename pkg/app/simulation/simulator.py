"""
Ground-truth data generation for every stage of the pipeline.

Each stage draws from its own stream derived from (seed, stage), so the same
spec always yields bit-identical series, panels and choices.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from app.choice.mnl import ChoiceDesign, ChoicePanel, choice_prob
from app.config import COVARIATES, SimulationSettings
from app.diffusion.model import AdoptionSeries, DiffusionParams, SurCovariance, observe, state_transition
from app.factors.analysis import FEATURE_COLUMNS, FeaturePanel, extract_factors, scores_by_category_week
from app.io.bundle import DatasetBundle, weekly_mean

logger = logging.getLogger(__name__)

STREAM_DIFFUSION = 0
STREAM_GLOBAL = 1
STREAM_FEATURES = 2
STREAM_CUSTOMERS = 3
STREAM_CHOICES = 4

# Local-adoption estimates for the eBooks category
EBOOKS = dict(p_inf=0.024, q_inf=0.0, p_imm=0.278, q_imm=0.191, M_inf=103.0, M_imm=1952.0, w=0.032, theta=0.044)


def _psd_root(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root factor R with R R' = cov; zero and singular covariances allowed."""
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class MixtureSpec:
    """True random-coefficient distribution: A_i ~ N(means[k] + delta @ z_i, covs[k]) with k ~ weights."""
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covs = np.asarray(self.covs, dtype=float).reshape(self.means.shape[0], self.means.shape[1], self.means.shape[1])
        self.delta = np.asarray(self.delta, dtype=float).reshape(self.means.shape[1], -1)
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to one")

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class ScenarioSpec:
    n_categories: int
    n_days: int
    n_weeks: int
    n_customers: int
    params: DiffusionParams
    cov: SurCovariance
    mixture: MixtureSpec
    global_params: Optional[DiffusionParams] = None
    social_source: str = "local-adopters"
    feature_noise: float = 0.05
    seed: int = 0
    settings: SimulationSettings = field(default_factory=SimulationSettings)

    def __post_init__(self):
        if self.params.n_categories != self.n_categories:
            raise ValueError("diffusion parameters do not match the category count")
        self.params.validate()
        if self.social_source not in COVARIATES:
            raise ValueError(f"unknown social source {self.social_source!r}")
        expected = self.n_categories + 1 + int(self.social_source != "none") + 3
        if self.mixture.dim != expected:
            raise ValueError(f"mixture dimension {self.mixture.dim} does not match the design dimension {expected}")

    @classmethod
    def default(
        cls,
        n_categories: int = 10,
        n_days: int = 200,
        n_weeks: int = 20,
        n_customers: int = 1258,
        social_source: str = "local-adopters",
        social_coef: float = 0.002,
        obs_noise: float = 0.01,
        seed: int = 0,
    ) -> "ScenarioSpec":
        """Desk-scale scenario centred on the eBooks local-adoption estimates; rates vary +-10% and markets +-20% across categories."""
        J = n_categories
        grid = np.linspace(-1.0, 1.0, J) if J > 1 else np.zeros(1)
        params = DiffusionParams(
            p_inf=np.full(J, EBOOKS["p_inf"]),
            q_inf=np.full(J, EBOOKS["q_inf"]),
            p_imm=EBOOKS["p_imm"] * (1.0 + 0.1 * grid),
            q_imm=EBOOKS["q_imm"] * (1.0 - 0.1 * grid),
            M_inf=EBOOKS["M_inf"] * (1.0 + 0.2 * grid),
            M_imm=EBOOKS["M_imm"] * (1.0 + 0.2 * grid),
            w=np.full(J, EBOOKS["w"]),
            theta=np.full(J, EBOOKS["theta"]),
        )
        plateau = params.theta * params.M_inf + (1.0 - params.theta) * params.M_imm
        state_sd = np.repeat(0.002 * plateau, 2)
        cov = SurCovariance(np.diag(state_sd ** 2), (obs_noise * plateau) ** 2)
        global_params = DiffusionParams(**{
            name: getattr(params, name) * (3.0 if name.startswith("M_") else 1.0)
            for name in ("p_inf", "q_inf", "p_imm", "q_imm", "M_inf", "M_imm", "w", "theta")
        })

        has_social = social_source != "none"
        d = J + 1 + int(has_social) + 3
        base = np.zeros(d)
        base[:J] = -4.5
        base[J] = 0.05
        if has_social:
            base[J + 1] = social_coef
        base[-3:] = (0.2, -0.1, 0.1)
        first, second = base.copy(), base.copy()
        first[0] += 1.5
        second[1] += 1.5
        covs = np.repeat((0.05 * np.eye(d))[None], 2, axis=0)
        if has_social:
            covs[:, J + 1, J + 1] = (0.1 * social_coef) ** 2
        delta = np.zeros((d, 1))
        delta[:J, 0] = 0.05
        mixture = MixtureSpec(np.array([0.5, 0.5]), np.vstack([first, second]), covs, delta)
        return cls(J, n_days, n_weeks, n_customers, params, cov, mixture, global_params, social_source, seed=seed)


@dataclass
class DiffusionTruth:
    series: AdoptionSeries
    c_inf: np.ndarray
    c_imm: np.ndarray


@dataclass
class ChoiceTruth:
    coefficients: np.ndarray
    labels: np.ndarray
    design: ChoiceDesign


@dataclass
class SimulatedData:
    bundle: DatasetBundle
    diffusion: DiffusionTruth
    global_diffusion: Optional[DiffusionTruth]
    choices: ChoiceTruth
    spec: ScenarioSpec


def simulate_diffusion(
    params: DiffusionParams,
    cov: SurCovariance,
    n_days: int,
    rng: np.random.Generator,
    settings: SimulationSettings = SimulationSettings(),
    categories=None,
    literal: bool = False,
) -> DiffusionTruth:
    """
    Forward simulation of the two-segment model from launch.

    Latent states get N(0, W) noise, are clamped to [0, M] and kept cumulative
    by a running maximum. Observations add N(0, V_j) noise; they are rounded,
    floored at zero and at the previous day's count unless the settings turn
    that off.
    """
    J = params.n_categories
    categories = list(range(1, J + 1)) if categories is None else list(categories)
    W_root = _psd_root(cov.W)
    obs_sd = np.sqrt(cov.V)

    c_inf, c_imm = np.zeros(J), np.zeros(J)
    inf_path, imm_path, obs = np.empty((n_days, J)), np.empty((n_days, J)), np.empty((n_days, J))
    previous_y = np.zeros(J)
    for t in range(n_days):
        next_inf, next_imm = state_transition(c_inf, c_imm, params, literal)
        noise = W_root @ rng.standard_normal(2 * J)
        next_inf = np.clip(next_inf + noise[0::2], 0.0, params.M_inf)
        next_imm = np.clip(next_imm + noise[1::2], 0.0, params.M_imm)
        c_inf, c_imm = np.maximum(next_inf, c_inf), np.maximum(next_imm, c_imm)
        inf_path[t], imm_path[t] = c_inf, c_imm

        y = observe(c_inf, c_imm, params.theta) + obs_sd * rng.standard_normal(J)
        if settings.round_observations:
            y = np.maximum(np.round(y), 0.0)
        if settings.monotone_observations:
            y = np.maximum(y, previous_y)
        obs[t] = y
        previous_y = y

    return DiffusionTruth(AdoptionSeries(categories, np.arange(n_days), obs), inf_path, imm_path)


def simulate_features(n_categories: int, n_weeks: int, noise: float, rng: np.random.Generator, categories=None) -> FeaturePanel:
    """Category characteristics driven by three latent factors plus idiosyncratic noise."""
    categories = list(range(1, n_categories + 1)) if categories is None else list(categories)
    n = n_categories * n_weeks
    loadings = np.zeros((len(FEATURE_COLUMNS), 3))
    loadings[[0, 2, 3], 0] = 0.9
    loadings[[4, 7], 1] = 0.9
    loadings[[1, 5, 6, 8], 2] = 0.9
    scores = rng.standard_normal((n, 3))
    z = scores @ loadings.T + noise * rng.standard_normal((n, len(FEATURE_COLUMNS)))

    n_paid = np.round(np.exp(3.0 + 0.3 * z[:, 4]))
    n_free = np.round(np.exp(3.5 + 0.3 * z[:, 5]))
    values = np.column_stack([
        np.exp(2.0 + 0.3 * z[:, 0]),
        1.0 / (1.0 + np.exp(2.0 - z[:, 1])),
        np.exp(0.5 + 0.3 * z[:, 2]),
        np.exp(-1.0 + 0.3 * z[:, 3]),
        n_paid,
        n_free,
        n_free / np.maximum(n_paid, 1.0),
        200.0 + 40.0 * z[:, 7],
        n_paid + n_free,
    ])
    cat_ids = np.repeat(categories, n_weeks)
    weeks = np.tile(np.arange(n_weeks), n_categories)
    return FeaturePanel(cat_ids, weeks, values)


def draw_coefficients(mixture: MixtureSpec, covariates: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Customer coefficients and their true component labels."""
    I = covariates.shape[0]
    labels = rng.choice(mixture.weights.shape[0], size=I, p=mixture.weights)
    noise = rng.standard_normal((I, mixture.dim))
    A = mixture.means[labels] + covariates @ mixture.delta.T
    for k in range(mixture.weights.shape[0]):
        members = labels == k
        if np.any(members):
            root = _psd_root(mixture.covs[k])
            A[members] += noise[members] @ root.T
    return A, labels


def simulate_choices(
    coefficients: np.ndarray,
    design: ChoiceDesign,
    tenure: np.ndarray,
    rng: np.random.Generator,
    customer_ids=None,
) -> ChoicePanel:
    """
    Weekly MNL choices with the download history evolving from each draw.

    Args:
        coefficients: (I, d) customer coefficients
        design: Week-level covariates
        tenure: (I,) tenure in days
        rng: Random stream
    """
    I, d = coefficients.shape
    J, T = design.n_categories, design.n_weeks
    customer_ids = np.arange(1, I + 1) if customer_ids is None else np.asarray(customer_ids)
    weekly = design.build(np.zeros((1, T)))[0]
    history = np.zeros(I)
    choices = np.zeros((I, T), dtype=int)
    for t in range(T):
        X_t = np.broadcast_to(weekly[t], (I, J, d)).copy()
        X_t[:, :, J] = history[:, None]
        v = np.einsum("ijd,id->ij", X_t, coefficients)
        cdf = np.cumsum(choice_prob(v), axis=1)
        u = rng.random(I)[:, None]
        choices[:, t] = np.minimum(np.sum(cdf < u, axis=1), J)
        history = history + (choices[:, t] >= 1)
    return ChoicePanel(customer_ids, tenure, choices, J)


def social_series(source: str, local: DiffusionTruth, global_: Optional[DiffusionTruth], n_weeks: int) -> Optional[np.ndarray]:
    """Weekly social-influence covariate the generator feeds into utilities."""
    if source == "none":
        return None
    scope, measure = source.split("-")
    truth = global_ if scope == "global" else local
    if truth is None:
        raise ValueError(f"{source} needs a global diffusion scenario")
    daily = truth.c_imm if measure == "imitators" else truth.series.values
    return weekly_mean(daily, n_weeks)


def simulate(spec: ScenarioSpec) -> SimulatedData:
    """Simulate a complete bundle plus the ground truth behind it."""
    categories = list(range(1, spec.n_categories + 1))
    local = simulate_diffusion(
        spec.params, spec.cov, spec.n_days, np.random.default_rng([spec.seed, STREAM_DIFFUSION]), spec.settings, categories
    )
    global_ = None
    if spec.global_params is not None:
        global_cov = SurCovariance(spec.cov.W * 9.0, spec.cov.V * 9.0)
        global_ = simulate_diffusion(
            spec.global_params, global_cov, spec.n_days, np.random.default_rng([spec.seed, STREAM_GLOBAL]), spec.settings, categories
        )

    features = simulate_features(
        spec.n_categories, spec.n_weeks, spec.feature_noise, np.random.default_rng([spec.seed, STREAM_FEATURES]), categories
    )
    scores = scores_by_category_week(extract_factors(features, 3), features, categories, spec.n_weeks)
    design = ChoiceDesign(spec.n_categories, scores, social_series(spec.social_source, local, global_, spec.n_weeks))

    customer_rng = np.random.default_rng([spec.seed, STREAM_CUSTOMERS])
    tenure = np.round(customer_rng.uniform(30.0, 1500.0, spec.n_customers))
    z = (tenure - tenure.mean()) / tenure.std() if tenure.std() > 0 else np.zeros_like(tenure)
    coefficients, labels = draw_coefficients(spec.mixture, z[:, None], customer_rng)
    panel = simulate_choices(coefficients, design, tenure, np.random.default_rng([spec.seed, STREAM_CHOICES]))

    final = local.series.values[-1]
    popularity = final / final.mean() if final.mean() > 0 else np.ones_like(final)
    bundle = DatasetBundle(local.series, features, panel, popularity, global_.series if global_ is not None else None)
    logger.info(
        "simulated %d categories x %d days, %d customers x %d weeks (social source %s)",
        spec.n_categories, spec.n_days, spec.n_customers, spec.n_weeks, spec.social_source,
    )
    return SimulatedData(bundle, local, global_, ChoiceTruth(coefficients, labels, design), spec)
