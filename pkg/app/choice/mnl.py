import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from app.errors import DataValidationError

logger = logging.getLogger(__name__)


@dataclass
class ChoicePanel:
    """
    Weekly category choices per customer.

    ``choices[i, t]`` is 0 for the outside good and 1..J for an inside category.
    """
    customer_ids: np.ndarray
    tenure: np.ndarray
    choices: np.ndarray
    n_categories: int

    def __post_init__(self):
        self.customer_ids = np.asarray(self.customer_ids, dtype=int)
        self.tenure = np.asarray(self.tenure, dtype=float)
        self.choices = np.atleast_2d(np.asarray(self.choices, dtype=int))
        if self.choices.shape[0] != self.customer_ids.shape[0] or self.tenure.shape[0] != self.customer_ids.shape[0]:
            raise ValueError("customer_ids, tenure and choices disagree on the number of customers")
        if self.choices.size and (self.choices.min() < 0 or self.choices.max() > self.n_categories):
            raise ValueError(f"choices must lie in 0..{self.n_categories}")

    @property
    def n_customers(self) -> int:
        return self.choices.shape[0]

    @property
    def n_weeks(self) -> int:
        return self.choices.shape[1]

    @property
    def n_obs(self) -> int:
        return int(self.choices.size)

    @property
    def history(self) -> np.ndarray:
        """Download-history counts s_it, zero in the first week."""
        return history_states(self.choices)

    @property
    def final_history(self) -> np.ndarray:
        return np.sum(self.choices >= 1, axis=1)

    def standardized_tenure(self) -> np.ndarray:
        """Tenure as an (I, 1) z-score covariate for the mixture regression."""
        sd = self.tenure.std()
        if sd <= 0:
            return np.zeros((self.n_customers, 1))
        return ((self.tenure - self.tenure.mean()) / sd)[:, None]

    def subset(self, rows: Sequence[int]) -> "ChoicePanel":
        rows = np.asarray(rows, dtype=int)
        return ChoicePanel(self.customer_ids[rows], self.tenure[rows], self.choices[rows], self.n_categories)


def history_states(choices: np.ndarray) -> np.ndarray:
    choices = np.atleast_2d(choices)
    adopted = (choices >= 1).astype(int)
    history = np.zeros_like(adopted)
    history[:, 1:] = np.cumsum(adopted[:, :-1], axis=1)
    return history


@dataclass
class ChoiceDesign:
    """
    Week-level covariates entering the utility of every inside category.

    Coefficient order: J category intercepts, history, social influence (when
    present), then one coefficient per factor.
    """
    n_categories: int
    factors: np.ndarray
    social: Optional[np.ndarray] = None

    def __post_init__(self):
        self.factors = np.asarray(self.factors, dtype=float)
        if self.factors.ndim != 3 or self.factors.shape[1] != self.n_categories:
            raise ValueError(f"factors must have shape (weeks, {self.n_categories}, k), got {self.factors.shape}")
        if self.social is not None:
            self.social = np.asarray(self.social, dtype=float)
            if self.social.shape != self.factors.shape[:2]:
                raise ValueError(f"social covariate must have shape {self.factors.shape[:2]}, got {self.social.shape}")

    @property
    def n_weeks(self) -> int:
        return self.factors.shape[0]

    @property
    def n_factors(self) -> int:
        return self.factors.shape[2]

    @property
    def has_social(self) -> bool:
        return self.social is not None

    @property
    def dim(self) -> int:
        return self.n_categories + 1 + int(self.has_social) + self.n_factors

    @property
    def social_index(self) -> Optional[int]:
        return self.n_categories + 1 if self.has_social else None

    @property
    def param_names(self) -> List[str]:
        J = self.n_categories
        names = [f"alpha_{j + 1}" for j in range(J)] + [f"alpha_{J + 1}"]
        if self.has_social:
            names.append(f"alpha_{J + 2}")
        names += [f"alpha_{J + 3 + f}" for f in range(self.n_factors)]
        return names

    def with_social(self, social: Optional[np.ndarray]) -> "ChoiceDesign":
        return ChoiceDesign(self.n_categories, self.factors, social)

    def build(self, history: np.ndarray) -> np.ndarray:
        """Design tensor X of shape (I, T, J, dim) for the given history states."""
        history = np.atleast_2d(history)
        I, T = history.shape
        if T > self.n_weeks:
            raise DataValidationError(f"choice panel covers {T} weeks but covariates only {self.n_weeks}")
        J = self.n_categories
        X = np.zeros((I, T, J, self.dim))
        X[..., :J] = np.eye(J)
        X[..., J] = history[:, :, None]
        col = J + 1
        if self.has_social:
            X[..., col] = self.social[None, :T, :]
            col += 1
        X[..., col:] = self.factors[None, :T]
        return X


def utility(
    A: np.ndarray,
    s_it: float,
    c_hat: Optional[np.ndarray],
    F_t: np.ndarray,
) -> np.ndarray:
    """Inside-good utilities for one customer-week; the outside good is fixed at 0."""
    A = np.asarray(A, dtype=float)
    F_t = np.atleast_2d(np.asarray(F_t, dtype=float))
    J, k = F_t.shape
    v = A[:J] + A[J] * s_it
    if c_hat is not None:
        v = v + A[J + 1] * np.asarray(c_hat, dtype=float)
    return v + F_t @ A[-k:]


def choice_prob(v: np.ndarray) -> np.ndarray:
    """MNL probabilities over (outside, 1..J) along the last axis."""
    v = np.asarray(v, dtype=float)
    augmented = np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)
    return softmax(augmented, axis=-1)


def log_choice_prob(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    augmented = np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)
    return log_softmax(augmented, axis=-1)


def utilities(A: np.ndarray, X: np.ndarray) -> np.ndarray:
    """(I, d) coefficients against (I, T, J, d) designs -> (I, T, J) utilities."""
    return np.einsum("itjd,id->itj", X, A)


def loglik_all(A: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Per-customer panel log-likelihoods."""
    logp = log_choice_prob(utilities(A, X))
    return np.take_along_axis(logp, Y[..., None], axis=-1)[..., 0].sum(axis=1)


def gradient_all(A: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    P = choice_prob(utilities(A, X))[..., 1:]
    mean_x = np.einsum("itj,itjd->itd", P, X)
    inside = (Y >= 1)
    chosen = np.take_along_axis(X, np.maximum(Y - 1, 0)[..., None, None], axis=2)[:, :, 0, :]
    chosen = chosen * inside[..., None]
    return np.sum(chosen - mean_x, axis=1)


def hessian_all(A: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Analytic Hessian of each customer's log-likelihood (negative semi-definite)."""
    P = choice_prob(utilities(A, X))[..., 1:]
    mean_x = np.einsum("itj,itjd->itd", P, X)
    second = np.einsum("itj,itjd,itje->ide", P, X, X)
    outer = np.einsum("itd,ite->ide", mean_x, mean_x)
    return -(second - outer)


def panel_loglik(A: np.ndarray, X_i: np.ndarray, y_i: np.ndarray) -> float:
    """Sum over weeks of log choice probabilities for one customer."""
    return float(loglik_all(np.asarray(A, float)[None], X_i[None], np.asarray(y_i)[None])[0])


def panel_gradient(A: np.ndarray, X_i: np.ndarray, y_i: np.ndarray) -> np.ndarray:
    return gradient_all(np.asarray(A, float)[None], X_i[None], np.asarray(y_i)[None])[0]


def panel_hessian(A: np.ndarray, X_i: np.ndarray) -> np.ndarray:
    return hessian_all(np.asarray(A, float)[None], X_i[None])[0]


class ExactPooled:
    """Pooled log-likelihood: every customer-week evaluated at the same coefficients."""

    def __init__(self, X: np.ndarray, Y: np.ndarray):
        I, T, J, d = X.shape
        self.X = X.reshape(1, I * T, J, d)
        self.Y = Y.reshape(1, I * T)

    def __call__(self, A: np.ndarray) -> float:
        return float(loglik_all(np.asarray(A, float)[None], self.X, self.Y)[0])

    def gradient(self, A: np.ndarray) -> np.ndarray:
        return gradient_all(np.asarray(A, float)[None], self.X, self.Y)[0]

    def hessian(self, A: np.ndarray) -> np.ndarray:
        return hessian_all(np.asarray(A, float)[None], self.X)[0]

    def maximize(self, start: Optional[np.ndarray] = None, ridge: float = 1e-6) -> "QuadraticPooled":
        """Pooled MLE and its curvature, as a second-order expansion of this likelihood."""
        d = self.X.shape[-1]
        x0 = np.zeros(d) if start is None else np.asarray(start, float)
        result = minimize(
            lambda a: -self(a) + 0.5 * ridge * a @ a,
            x0,
            jac=lambda a: -self.gradient(a) + ridge * a,
            method="BFGS",
        )
        if not result.success:
            logger.warning("pooled MNL maximisation did not converge: %s", result.message)
        mode = result.x
        neg_hess = -self.hessian(mode) + ridge * np.eye(d)
        return QuadraticPooled(mode=mode, neg_hessian=0.5 * (neg_hess + neg_hess.T), value=self(mode))


@dataclass
class QuadraticPooled:
    """Second-order expansion of the pooled log-likelihood around its maximum."""
    mode: np.ndarray
    neg_hessian: np.ndarray
    value: float

    def __call__(self, A: np.ndarray) -> float:
        diff = np.asarray(A, float) - self.mode
        return float(self.value - 0.5 * diff @ self.neg_hessian @ diff)

    def gradient(self, A: np.ndarray) -> np.ndarray:
        return -self.neg_hessian @ (np.asarray(A, float) - self.mode)


def pooling_weights(n_obs: np.ndarray) -> np.ndarray:
    """beta_i = n_i / N."""
    n_obs = np.asarray(n_obs, dtype=float)
    total = n_obs.sum()
    if total <= 0:
        raise DataValidationError("fractional likelihood needs at least one observation")
    return n_obs / total


def fractional_loglik(
    A: np.ndarray,
    X_i: np.ndarray,
    y_i: np.ndarray,
    pooled: Callable[[np.ndarray], float],
    w: float,
    weight: float,
) -> float:
    """
    Unit log-likelihood blended with the scaled pooled log-likelihood.

    Args:
        A: Coefficient vector
        X_i, y_i: The customer's design and choices
        pooled: Pooled log-likelihood as a function of A
        w: Pooling weight in [0, 1)
        weight: n_i / N for this customer
    """
    if not 0.0 <= w < 1.0:
        raise ValueError(f"fractional weight w must be in [0, 1), got {w}")
    unit = panel_loglik(A, X_i, y_i)
    if w == 0.0:
        return unit
    return (1.0 - w) * unit + w * weight * pooled(A)


def _fractional_grad(A, X_i, y_i, pooled, w, weight) -> np.ndarray:
    grad = panel_gradient(A, X_i, y_i)
    if w == 0.0:
        return grad
    return (1.0 - w) * grad + w * weight * pooled.gradient(A)


def _unit_mode(X_i, y_i, pooled, w, weight, ridge) -> Tuple[np.ndarray, bool]:
    d = X_i.shape[-1]
    center = pooled.mode

    def objective(a):
        return -fractional_loglik(a, X_i, y_i, pooled, w, weight) + 0.5 * ridge * float((a - center) @ (a - center))

    def jac(a):
        return -_fractional_grad(a, X_i, y_i, pooled, w, weight) + ridge * (a - center)

    result = minimize(objective, np.zeros(d), jac=jac, method="BFGS")
    return result.x, bool(result.success)


def unit_modes(
    X: np.ndarray,
    Y: np.ndarray,
    pooled: QuadraticPooled,
    w: float,
    weights: np.ndarray,
    ridge: float = 0.0,
    n_jobs: int = 1,
) -> np.ndarray:
    """
    Maximisers of every customer's fractional likelihood, by BFGS from zero.

    ``ridge`` is the precision of a Gaussian prior centred on the pooled mode;
    it keeps intercepts finite for customers who never chose a category.
    """
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    if n_jobs == 1:
        results = [_unit_mode(X[i], Y[i], pooled, w, float(weights[i]), ridge) for i in range(X.shape[0])]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_unit_mode)(X[i], Y[i], pooled, w, float(weights[i]), ridge) for i in range(X.shape[0])
        )
    failed = sum(1 for _, ok in results if not ok)
    if failed:
        logger.warning("fractional likelihood maximisation did not converge for %d of %d customers", failed, len(results))
    return np.array([mode for mode, _ in results])


def fractional_neg_hessians(
    modes: np.ndarray,
    X: np.ndarray,
    Y: np.ndarray,
    pooled: QuadraticPooled,
    w: float,
    weights: np.ndarray,
    step: float = 1e-5,
) -> np.ndarray:
    """
    Negative Hessians of the fractional log-likelihood at ``modes``.

    Central differences of the analytic gradient, one coordinate at a time for
    all customers at once, then symmetrised.
    """
    I, d = modes.shape

    def grad(A):
        g = gradient_all(A, X, Y)
        if w == 0.0:
            return g
        return (1.0 - w) * g + w * weights[:, None] * (-(A - pooled.mode) @ pooled.neg_hessian)

    H = np.zeros((I, d, d))
    for k in range(d):
        h = step * np.maximum(1.0, np.abs(modes[:, k]))
        shift = np.zeros_like(modes)
        shift[:, k] = h
        H[:, :, k] = -(grad(modes + shift) - grad(modes - shift)) / (2.0 * h[:, None])
    return 0.5 * (H + np.transpose(H, (0, 2, 1)))
