import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.errors import DegenerateInputError

logger = logging.getLogger(__name__)

FEATURE_COLUMNS = (
    "avg_file_size",
    "featured_rate",
    "avg_price",
    "var_price",
    "n_paid",
    "n_free",
    "free_paid_ratio",
    "avg_tenure",
    "n_total",
)
COUNT_COLUMNS = ("n_paid", "n_free", "n_total")
EIGEN_TOL = 1e-10


@dataclass
class FeaturePanel:
    """Category characteristics, one row per (category, week)."""
    category_id: np.ndarray
    week: np.ndarray
    values: np.ndarray
    columns: Tuple[str, ...] = FEATURE_COLUMNS

    def __post_init__(self):
        self.category_id = np.asarray(self.category_id, dtype=int)
        self.week = np.asarray(self.week, dtype=int)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape != (self.category_id.shape[0], len(self.columns)):
            raise ValueError(f"feature values have shape {self.values.shape}, expected ({self.category_id.shape[0]}, {len(self.columns)})")

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def invariant_violations(self) -> List[Tuple[int, str, str]]:
        """Rows breaking the count / variance / total rules as (row, column, message)."""
        problems = []
        for name in COUNT_COLUMNS + ("var_price",):
            if name in self.columns:
                for row in np.flatnonzero(self.column(name) < 0):
                    problems.append((int(row), name, "must be >= 0"))
        if all(name in self.columns for name in COUNT_COLUMNS):
            mismatch = ~np.isclose(self.column("n_total"), self.column("n_paid") + self.column("n_free"))
            for row in np.flatnonzero(mismatch):
                problems.append((int(row), "n_total", "must equal n_paid + n_free"))
        return problems


@dataclass
class FactorSolution:
    loadings: np.ndarray
    scores: np.ndarray
    noise_cov: np.ndarray
    variance_explained: float
    eigenvalues: np.ndarray
    unrotated_loadings: np.ndarray
    rotation: np.ndarray
    columns: Tuple[str, ...] = FEATURE_COLUMNS
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    collinear_columns: List[str] = field(default_factory=list)

    @property
    def communalities(self) -> np.ndarray:
        return np.sum(self.loadings ** 2, axis=1)


def varimax_criterion(loadings: np.ndarray) -> float:
    p = loadings.shape[0]
    sq = loadings ** 2
    return float(np.sum(np.sum(sq ** 2, axis=0) / p - (np.sum(sq, axis=0) / p) ** 2))


def varimax(loadings: np.ndarray, tol: float = 1e-8, max_iter: int = 1000) -> Tuple[np.ndarray, np.ndarray]:
    """
    Orthogonal varimax rotation (raw, no Kaiser normalisation).

    Returns:
        (rotated loadings, rotation matrix) with rotated = loadings @ rotation
    """
    loadings = np.asarray(loadings, dtype=float)
    p, k = loadings.shape
    rotation = np.eye(k)
    if k < 2:
        return loadings.copy(), rotation

    criterion = varimax_criterion(loadings)
    for _ in range(max_iter):
        rotated = loadings @ rotation
        target = rotated ** 3 - rotated @ np.diag(np.sum(rotated ** 2, axis=0)) / p
        u, _, vh = np.linalg.svd(loadings.T @ target)
        new_rotation = u @ vh
        new_criterion = varimax_criterion(loadings @ new_rotation)
        step = np.max(np.abs(new_rotation - rotation))
        if new_criterion < criterion:
            break
        gain = new_criterion - criterion
        rotation, criterion = new_rotation, new_criterion
        if gain < tol and step < 1e-9:
            break

    return loadings @ rotation, rotation


def _standardize(X: np.ndarray, columns: Sequence[str]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    constant = [columns[c] for c in np.flatnonzero(scale <= 1e-12 * np.maximum(1.0, np.abs(mean)))]
    if constant:
        raise DegenerateInputError(f"constant feature columns cannot be standardised: {constant}")
    return (X - mean) / scale, mean, scale


def extract_factors(panel, k: int = 3) -> FactorSolution:
    """
    Principal-component factor extraction on the correlation matrix, varimax rotated.

    Args:
        panel: FeaturePanel or (n, p) array of feature rows
        k: Number of factors to retain

    Returns:
        FactorSolution with rotated loadings and unit-variance scores
    """
    if isinstance(panel, FeaturePanel):
        X, columns = panel.values, tuple(panel.columns)
    else:
        X = np.atleast_2d(np.asarray(panel, dtype=float))
        columns = FEATURE_COLUMNS if X.shape[1] == len(FEATURE_COLUMNS) else tuple(f"x{c}" for c in range(X.shape[1]))

    n, p = X.shape
    if not 1 <= k <= p:
        raise ValueError(f"k must lie in [1, {p}], got {k}")
    if n < k + 1:
        raise DegenerateInputError(f"need at least {k + 1} observations for {k} factors, got {n}")

    Z, mean, scale = _standardize(X, columns)
    corr = Z.T @ Z / n
    corr = 0.5 * (corr + corr.T)
    eigvals, eigvecs = np.linalg.eigh(corr)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]

    null = eigvals < EIGEN_TOL
    collinear: List[str] = []
    if np.any(null):
        involved = np.any(np.abs(eigvecs[:, null]) > 1e-6, axis=1)
        collinear = [columns[c] for c in np.flatnonzero(involved)]
        rank = int(np.sum(~null))
        if rank < k:
            raise DegenerateInputError(
                f"correlation matrix has rank {rank} < {k} factors; collinear columns: {collinear}"
            )
        logger.warning("correlation matrix is rank deficient (rank %d); collinear columns: %s", rank, collinear)

    vals_k, vecs_k = eigvals[:k], eigvecs[:, :k]
    unrotated = vecs_k * np.sqrt(vals_k)
    loadings, rotation = varimax(unrotated)

    signs = np.sign(loadings[np.argmax(np.abs(loadings), axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    loadings = loadings * signs
    rotation = rotation * signs

    scores = (Z @ vecs_k / np.sqrt(vals_k)) @ rotation
    communalities = np.sum(loadings ** 2, axis=1)
    noise_cov = np.diag(np.clip(1.0 - communalities, 0.0, None))

    return FactorSolution(
        loadings=loadings,
        scores=scores,
        noise_cov=noise_cov,
        variance_explained=float(np.sum(vals_k) / p),
        eigenvalues=eigvals,
        unrotated_loadings=unrotated,
        rotation=rotation,
        columns=columns,
        mean=mean,
        scale=scale,
        collinear_columns=collinear,
    )


def scores_by_category_week(
    solution: FactorSolution,
    panel: FeaturePanel,
    categories: Sequence[int],
    n_weeks: int,
) -> np.ndarray:
    """Arrange factor scores as a (weeks, categories, k) array for the choice utility."""
    index = {int(c): j for j, c in enumerate(categories)}
    out = np.zeros((n_weeks, len(categories), solution.scores.shape[1]))
    for row, (cat, week) in enumerate(zip(panel.category_id, panel.week)):
        if int(cat) in index and 0 <= int(week) < n_weeks:
            out[int(week), index[int(cat)]] = solution.scores[row]
    return out
