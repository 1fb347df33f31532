import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import statsmodels.api as sm

from app.choice.mnl import ChoiceDesign, choice_prob
from app.choice.sampler import ChoiceFit
from app.config import GaSettings, PolicySettings
from app.diffusion.genetic import GaConfig, genetic_optimize
from app.errors import ConfigError, DegenerateInputError

logger = logging.getLogger(__name__)

POLICY_NAMES = ("baseline", "shutdown", "plus_1pct", "minus_1pct", "optimal")
# exp(LOG_ZERO) underflows to a zero increment
LOG_ZERO = -745.0


@dataclass
class InfluencePolicy:
    """Imitator density per category (rows) and week (columns); non-decreasing along weeks."""
    c: np.ndarray

    def __post_init__(self):
        self.c = np.atleast_2d(np.asarray(self.c, dtype=float))
        if np.any(self.c < 0):
            raise ValueError("influence policy must be non-negative")
        if np.any(np.diff(self.c, axis=1) < 0):
            raise ValueError("influence policy must be non-decreasing over weeks")

    @property
    def n_categories(self) -> int:
        return self.c.shape[0]

    @property
    def n_weeks(self) -> int:
        return self.c.shape[1]

    @classmethod
    def from_baseline(cls, weekly: np.ndarray) -> "InfluencePolicy":
        """Policy from a (weeks, categories) covariate, made monotone by a running maximum."""
        weekly = np.clip(np.asarray(weekly, dtype=float), 0.0, None)
        return cls(np.maximum.accumulate(weekly, axis=0).T)

    def scaled(self, factor: float) -> "InfluencePolicy":
        return InfluencePolicy(self.c * factor)


def decode_policy(u: np.ndarray, upper: np.ndarray, n_weeks: int) -> InfluencePolicy:
    """c_jt = U_j * min(1, sum_{s<=t} exp(u_js)); monotone and within [0, U_j] by construction."""
    steps = np.exp(np.clip(np.asarray(u, dtype=float), LOG_ZERO, 50.0).reshape(upper.shape[0], n_weeks))
    return InfluencePolicy(upper[:, None] * np.minimum(1.0, np.cumsum(steps, axis=1)))


def encode_policy(policy: InfluencePolicy, upper: np.ndarray) -> np.ndarray:
    safe = np.where(upper > 0, upper, 1.0)
    fractions = np.minimum(policy.c / safe[:, None], 1.0)
    increments = np.diff(fractions, axis=1, prepend=0.0)
    with np.errstate(divide="ignore"):
        return np.where(increments > 0, np.log(increments), LOG_ZERO).ravel()


class AdoptionModel:
    """
    Expected adoptions as a function of the social-influence trajectory.

    Holds the policy-independent part of every utility for a fixed set of
    posterior draws, so each evaluation only adds the social term.
    """

    def __init__(self, draws: np.ndarray, design: ChoiceDesign, history: np.ndarray, resimulate_history: bool = False):
        if not design.has_social:
            raise ConfigError("counterfactual evaluation needs a model with a social-influence coefficient")
        self.draws = np.asarray(draws, dtype=float)
        self.design = design
        self.history = np.atleast_2d(history).astype(float)
        self.resimulate_history = resimulate_history
        J = design.n_categories
        social = design.social_index
        factors = design.factors[: self.history.shape[1]]
        k = design.n_factors

        self.intercepts = self.draws[..., :J]
        self.history_coef = self.draws[..., J]
        self.social_coef = self.draws[..., social]
        factor_term = np.einsum("tjf,nif->nitj", factors, self.draws[..., social + 1: social + 1 + k])
        self.static = factor_term + self.intercepts[:, :, None, :]

    @property
    def n_weeks(self) -> int:
        return self.history.shape[1]

    def evaluate(self, policy: InfluencePolicy) -> Tuple[float, np.ndarray]:
        n_draws, I = self.draws.shape[:2]
        per_category = np.zeros(self.design.n_categories)
        state = np.zeros((n_draws, I)) if self.resimulate_history else None
        for t in range(self.n_weeks):
            s_t = state if self.resimulate_history else self.history[None, :, t]
            v = (
                self.static[:, :, t, :]
                + (self.history_coef * s_t)[..., None]
                + self.social_coef[..., None] * policy.c[:, t]
            )
            inside = choice_prob(v)[..., 1:]
            per_category += inside.sum(axis=1).mean(axis=0)
            if self.resimulate_history:
                state = state + inside.sum(axis=-1)
        return float(per_category.sum()), per_category


def expected_adoption(
    policy: InfluencePolicy,
    draws: np.ndarray,
    design: ChoiceDesign,
    history: np.ndarray,
    resimulate_history: bool = False,
) -> Tuple[float, np.ndarray]:
    """
    Total and per-category expected adoptions under ``policy``, averaged over draws.

    Args:
        policy: Social-influence trajectory replacing the fitted covariate
        draws: (n_draws, I, d) posterior draws of customer coefficients
        design: Covariates of the fitted variant
        history: (I, T) download-history states
        resimulate_history: Evolve history by expected increments instead of holding it fixed
    """
    return AdoptionModel(draws, design, history, resimulate_history).evaluate(policy)


@dataclass
class PolicyReport:
    categories: List[int]
    adoption: Dict[str, np.ndarray]
    totals: Dict[str, float]
    upper: np.ndarray
    generations: int = 0
    improved: bool = True

    def percent_change(self, name: str) -> np.ndarray:
        base = self.adoption["baseline"]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(base > 0, 100.0 * (self.adoption[name] - base) / base, 0.0)

    def total_percent_change(self, name: str) -> float:
        base = self.totals["baseline"]
        return 100.0 * (self.totals[name] - base) / base if base > 0 else 0.0

    @property
    def improvement(self) -> np.ndarray:
        """Per-category optimal-policy gain over baseline, in percent."""
        return self.percent_change("optimal")

    def records(self) -> List[dict]:
        rows = []
        for j, cat in enumerate(self.categories):
            row = {"category_id": int(cat)}
            for name in POLICY_NAMES:
                row[name] = float(self.adoption[name][j])
                if name != "baseline":
                    row[f"{name}_pct"] = float(self.percent_change(name)[j])
            rows.append(row)
        total = {"category_id": "total"}
        for name in POLICY_NAMES:
            total[name] = self.totals[name]
            if name != "baseline":
                total[f"{name}_pct"] = self.total_percent_change(name)
        rows.append(total)
        return rows


@dataclass
class PolicyResult:
    policy: InfluencePolicy
    report: PolicyReport
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0))


def select_draws(fit: ChoiceFit, n_draws: int) -> np.ndarray:
    """Evenly spaced subset of the retained draws."""
    total = fit.draws.shape[0]
    idx = np.unique(np.linspace(0, total - 1, min(n_draws, total)).round().astype(int))
    return fit.draws[idx]


def optimize_policy(
    fit: ChoiceFit,
    design: ChoiceDesign,
    history: np.ndarray,
    categories: List[int],
    settings: PolicySettings,
    ga: GaSettings,
    seed: int,
    upper: Optional[np.ndarray] = None,
) -> PolicyResult:
    """
    Search monotone social-influence trajectories for maximal expected adoption.

    The GA works on log weekly increments, so every candidate is monotone and
    capped at ``upper``. Its population is seeded with the baseline, scaled
    and upper-bound policies. If the best decoded policy falls short of the
    comparison policies the search is retried with a doubled population; the
    returned optimum is never worse than any comparison policy.
    """
    model = AdoptionModel(select_draws(fit, settings.n_draws), design, history, settings.resimulate_history)
    T = model.n_weeks
    baseline = InfluencePolicy.from_baseline(design.social[:T])
    if upper is None:
        upper = settings.upper_multiplier * baseline.c.max(axis=1)
    upper = np.asarray(upper, dtype=float)
    J = baseline.n_categories

    comparisons = {
        "baseline": baseline,
        "shutdown": InfluencePolicy(np.zeros_like(baseline.c)),
        "plus_1pct": baseline.scaled(1.01),
        "minus_1pct": baseline.scaled(0.99),
    }
    evaluated = {name: model.evaluate(policy) for name, policy in comparisons.items()}
    best_reference = max(total for total, _ in evaluated.values())

    ceiling = InfluencePolicy(np.repeat(upper[:, None], T, axis=1))
    seeds = [encode_policy(p, upper) for p in comparisons.values() if np.all(p.c <= upper[:, None] + 1e-12)]
    seeds.append(encode_policy(ceiling, upper))
    center = seeds[0]

    def objective(u: np.ndarray) -> float:
        return model.evaluate(decode_policy(u, upper, T))[0]

    population = settings.population
    best_policy, best_total, trace = None, -np.inf, np.zeros(0)
    tolerance = 1e-9 * max(abs(best_reference), 1.0)
    for attempt in range(settings.retries + 1):
        cfg = GaConfig.from_settings(ga, seed=seed + attempt, population=population, generations=settings.generations)
        result = genetic_optimize(objective, center, cfg, scale=np.full(center.shape, 5.0), seeds=seeds[1:])
        candidate = decode_policy(result.best, upper, T)
        total = model.evaluate(candidate)[0]
        if total > best_total:
            best_policy, best_total, trace = candidate, total, result.trace
        if best_total >= best_reference - tolerance:
            break
        logger.info("policy search attempt %d fell short (%.6g < %.6g); doubling population", attempt, best_total, best_reference)
        population *= 2

    improved = best_total > best_reference
    if not improved:
        # decoded search results can trail an exact comparison policy by rounding
        name = max(evaluated, key=lambda n: evaluated[n][0])
        if best_total < best_reference - tolerance:
            logger.warning("policy search did not beat the comparison policies; returning %s", name)
        best_policy = comparisons[name]

    evaluated["optimal"] = model.evaluate(best_policy)
    report = PolicyReport(
        categories=list(categories)[:J],
        adoption={name: value[1] for name, value in evaluated.items()},
        totals={name: value[0] for name, value in evaluated.items()},
        upper=upper,
        generations=settings.generations,
        improved=improved,
    )
    return PolicyResult(policy=best_policy, report=report, trace=trace)


@dataclass
class RegressionResult:
    intercept: float
    slope: float
    std_errors: np.ndarray
    t_values: np.ndarray
    p_values: np.ndarray
    r_squared: float
    n_obs: int

    def record(self) -> dict:
        return {
            "intercept": self.intercept,
            "slope": self.slope,
            "std_errors": [float(v) for v in self.std_errors],
            "t_values": [float(v) for v in self.t_values],
            "p_values": [float(v) for v in self.p_values],
            "r_squared": self.r_squared,
            "n_obs": self.n_obs,
        }


def popularity_regression(improvements: np.ndarray, ranks: np.ndarray) -> RegressionResult:
    """OLS of per-category improvement on popularity rank, with inference."""
    improvements = np.asarray(improvements, dtype=float)
    ranks = np.asarray(ranks, dtype=float)
    if improvements.shape != ranks.shape or improvements.ndim != 1:
        raise ValueError("improvements and ranks must be 1-D arrays of equal length")
    if improvements.shape[0] < 3:
        raise DegenerateInputError(f"popularity regression needs at least 3 categories, got {improvements.shape[0]}")
    if np.ptp(ranks) == 0:
        raise DegenerateInputError("popularity ranks have zero variance", column="popularity")

    with np.errstate(divide="ignore", invalid="ignore"):
        fitted = sm.OLS(improvements, sm.add_constant(ranks)).fit()
    params = np.asarray(fitted.params)
    return RegressionResult(
        intercept=float(params[0]),
        slope=float(params[1]),
        std_errors=np.asarray(fitted.bse),
        t_values=np.asarray(fitted.tvalues),
        p_values=np.asarray(fitted.pvalues),
        r_squared=float(fitted.rsquared),
        n_obs=int(fitted.nobs),
    )
