"""
CSV ingestion and emission of the estimation inputs.

Every validation failure raises DataValidationError carrying the file, the
1-based line number (the header is line 1) and the offending column.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.choice.mnl import ChoicePanel
from app.diffusion.model import AdoptionSeries
from app.errors import DataValidationError
from app.factors.analysis import FEATURE_COLUMNS, FeaturePanel

logger = logging.getLogger(__name__)

DAYS_PER_WEEK = 7

SCHEMAS: Dict[str, List[str]] = {
    "adoption.csv": ["category_id", "day", "cumulative_adopters"],
    "adoption_global.csv": ["category_id", "day", "cumulative_adopters"],
    "features.csv": ["category_id", "week", *FEATURE_COLUMNS],
    "choices.csv": ["customer_id", "week", "choice"],
    "customers.csv": ["customer_id", "tenure_days"],
    "popularity.csv": ["category_id", "popularity"],
}
INTEGER_COLUMNS = {"category_id", "day", "week", "customer_id", "choice"}


@dataclass
class DatasetBundle:
    """
    Everything the pipeline consumes.

    Categories are ordered by id; inside-good choice j refers to the j-th of them.
    """
    adoption: AdoptionSeries
    features: FeaturePanel
    choices: ChoicePanel
    popularity: np.ndarray
    adoption_global: Optional[AdoptionSeries] = None

    @property
    def categories(self) -> List[int]:
        return list(self.adoption.categories)

    @property
    def n_weeks(self) -> int:
        return self.choices.n_weeks

    def adoption_for(self, scope: str) -> AdoptionSeries:
        if scope == "global":
            if self.adoption_global is None:
                raise DataValidationError("global adoption series requested but adoption_global.csv was not supplied")
            return self.adoption_global
        return self.adoption

    def weekly_adopters(self, scope: str = "local") -> np.ndarray:
        return weekly_mean(self.adoption_for(scope).values, self.n_weeks)


def weekly_mean(daily: np.ndarray, n_weeks: int) -> np.ndarray:
    """
    Within-week mean of a (days, categories) series, shape (n_weeks, categories).

    Weeks beyond the last observed day repeat the final day's value.
    """
    daily = np.atleast_2d(np.asarray(daily, dtype=float))
    n_days = daily.shape[0]
    out = np.empty((n_weeks, daily.shape[1]))
    for week in range(n_weeks):
        start = week * DAYS_PER_WEEK
        stop = min(start + DAYS_PER_WEEK, n_days)
        out[week] = daily[start:stop].mean(axis=0) if start < n_days else daily[-1]
    return out


def _to_number(text: str) -> float:
    try:
        return float(text.strip())
    except ValueError:
        return float("nan")


def _line(row: int) -> int:
    return row + 2


def _read_table(path: Path, name: str) -> pd.DataFrame:
    if not path.exists():
        raise DataValidationError("file not found", file=path)
    try:
        frame = pd.read_csv(path, encoding="utf-8", dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise DataValidationError("file is empty", file=path) from e
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataValidationError(f"cannot parse CSV: {e}", file=path) from e

    frame.columns = [c.strip() for c in frame.columns]
    for column in SCHEMAS[name]:
        if column not in frame.columns:
            raise DataValidationError("missing column", file=path, line=1, column=column)
    if frame.empty:
        raise DataValidationError("file has a header but no data rows", file=path)

    out = pd.DataFrame(index=frame.index)
    for column in SCHEMAS[name]:
        values = frame[column].map(_to_number)
        bad = ~np.isfinite(values.to_numpy(dtype=float))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataValidationError(f"not a finite number: {frame[column].iloc[row]!r}", file=path, line=_line(row), column=column)
        if column in INTEGER_COLUMNS:
            fractional = values != np.floor(values)
            if fractional.any():
                row = int(np.flatnonzero(fractional.to_numpy())[0])
                raise DataValidationError("expected an integer", file=path, line=_line(row), column=column)
            values = values.astype(np.int64)
        out[column] = values
    return out


def _check_contiguous(frame: pd.DataFrame, key: str, index: str, path: Path) -> int:
    """Per ``key``, ``index`` must run 0, 1, 2, ... in file order; returns the common length."""
    length = None
    for _, group in frame.groupby(key, sort=False):
        expected = np.arange(len(group))
        mismatch = np.flatnonzero(group[index].to_numpy() != expected)
        if mismatch.size:
            row = int(group.index[mismatch[0]])
            raise DataValidationError(
                f"{index} {int(group[index].iloc[mismatch[0]])} breaks the contiguous sequence (expected {int(expected[mismatch[0]])})",
                file=path, line=_line(row), column=index,
            )
        if length is None:
            length = len(group)
        elif len(group) != length:
            raise DataValidationError(
                f"{key} {int(group[key].iloc[0])} has {len(group)} {index}s, others have {length}",
                file=path, line=_line(int(group.index[-1])), column=index,
            )
    return int(length)


def _unknown_ids(frame: pd.DataFrame, column: str, known: Sequence[int], path: Path) -> None:
    unknown = ~frame[column].isin(list(known))
    if unknown.any():
        row = int(np.flatnonzero(unknown.to_numpy())[0])
        raise DataValidationError(f"unknown id {int(frame[column].iloc[row])}", file=path, line=_line(row), column=column)


def _load_adoption(path: Path, monotonize: bool, categories: Optional[List[int]] = None) -> AdoptionSeries:
    name = "adoption_global.csv" if path.name == "adoption_global.csv" else "adoption.csv"
    frame = _read_table(path, name)
    if categories is not None:
        _unknown_ids(frame, "category_id", categories, path)
    n_days = _check_contiguous(frame, "category_id", "day", path)
    cats = sorted(int(c) for c in frame["category_id"].unique())
    if categories is not None and cats != categories:
        missing = sorted(set(categories) - set(cats))
        raise DataValidationError(f"categories missing from series: {missing}", file=path, column="category_id")

    values = np.empty((n_days, len(cats)))
    for j, cat in enumerate(cats):
        group = frame[frame["category_id"] == cat]
        series = group["cumulative_adopters"].to_numpy(dtype=float)
        if np.any(series < 0):
            row = int(group.index[np.flatnonzero(series < 0)[0]])
            raise DataValidationError("cumulative adopters must be >= 0", file=path, line=_line(row), column="cumulative_adopters")
        drops = np.flatnonzero(np.diff(series) < 0)
        if drops.size:
            row = int(group.index[drops[0] + 1])
            if not monotonize:
                raise DataValidationError("cumulative series decreases", file=path, line=_line(row), column="cumulative_adopters")
            logger.warning("%s, line %d: category %d cumulative series decreases; monotonized", path, _line(row), cat)
            series = np.maximum.accumulate(series)
        values[:, j] = series
    return AdoptionSeries(cats, np.arange(n_days), values)


def _load_features(path: Path, categories: List[int]) -> FeaturePanel:
    frame = _read_table(path, "features.csv")
    _unknown_ids(frame, "category_id", categories, path)
    _check_contiguous(frame, "category_id", "week", path)
    frame = frame.sort_values(["category_id", "week"], kind="stable")
    panel = FeaturePanel(
        frame["category_id"].to_numpy(),
        frame["week"].to_numpy(),
        frame[list(FEATURE_COLUMNS)].to_numpy(dtype=float),
    )
    problems = panel.invariant_violations()
    if problems:
        row, column, message = problems[0]
        raise DataValidationError(message, file=path, line=_line(int(frame.index[row])), column=column)
    return panel


def _load_choices(choices_path: Path, customers_path: Path, n_categories: int) -> ChoicePanel:
    customers = _read_table(customers_path, "customers.csv")
    duplicated = customers["customer_id"].duplicated()
    if duplicated.any():
        row = int(np.flatnonzero(duplicated.to_numpy())[0])
        raise DataValidationError("duplicate customer id", file=customers_path, line=_line(row), column="customer_id")
    if (customers["tenure_days"] < 0).any():
        row = int(np.flatnonzero((customers["tenure_days"] < 0).to_numpy())[0])
        raise DataValidationError("tenure must be >= 0", file=customers_path, line=_line(row), column="tenure_days")

    frame = _read_table(choices_path, "choices.csv")
    _unknown_ids(frame, "customer_id", customers["customer_id"].tolist(), choices_path)
    out_of_range = (frame["choice"] < 0) | (frame["choice"] > n_categories)
    if out_of_range.any():
        row = int(np.flatnonzero(out_of_range.to_numpy())[0])
        raise DataValidationError(f"choice must lie in 0..{n_categories}", file=choices_path, line=_line(row), column="choice")
    n_weeks = _check_contiguous(frame, "customer_id", "week", choices_path)

    ids = sorted(int(c) for c in frame["customer_id"].unique())
    if len(ids) != len(customers):
        silent = sorted(set(customers["customer_id"].tolist()) - set(ids))
        logger.warning("%d customers have no choices and are dropped: %s", len(silent), silent[:10])
    ordered = frame.sort_values(["customer_id", "week"], kind="stable")
    matrix = ordered["choice"].to_numpy().reshape(len(ids), n_weeks)
    tenure = customers.set_index("customer_id").loc[ids, "tenure_days"].to_numpy(dtype=float)
    return ChoicePanel(np.array(ids), tenure, matrix, n_categories)


def _load_popularity(path: Path, categories: List[int]) -> np.ndarray:
    frame = _read_table(path, "popularity.csv")
    _unknown_ids(frame, "category_id", categories, path)
    lookup = dict(zip(frame["category_id"].tolist(), frame["popularity"].tolist()))
    missing = [c for c in categories if c not in lookup]
    if missing:
        raise DataValidationError(f"categories without popularity: {missing}", file=path, column="category_id")
    return np.array([lookup[c] for c in categories], dtype=float)


def load_bundle(directory: Path, monotonize: bool = True) -> DatasetBundle:
    """
    Load and validate a dataset directory.

    Args:
        directory: Folder holding adoption.csv, features.csv, choices.csv,
            customers.csv, popularity.csv and optionally adoption_global.csv
        monotonize: Repair decreasing cumulative series with a warning instead of failing

    Returns:
        Validated DatasetBundle
    """
    directory = Path(directory)
    adoption = _load_adoption(directory / "adoption.csv", monotonize)
    categories = adoption.categories

    global_path = directory / "adoption_global.csv"
    adoption_global = _load_adoption(global_path, monotonize, categories) if global_path.exists() else None
    if adoption_global is not None and adoption_global.n_days != adoption.n_days:
        raise DataValidationError(
            f"global series has {adoption_global.n_days} days, local has {adoption.n_days}", file=global_path, column="day"
        )

    features = _load_features(directory / "features.csv", categories)
    choices = _load_choices(directory / "choices.csv", directory / "customers.csv", len(categories))
    popularity = _load_popularity(directory / "popularity.csv", categories)

    weeks_covered = np.unique(features.week).shape[0]
    if weeks_covered < choices.n_weeks:
        raise DataValidationError(
            f"features cover {weeks_covered} weeks but choices need {choices.n_weeks}", file=directory / "features.csv", column="week"
        )

    logger.info(
        "loaded %s: %d categories, %d days, %d customers, %d weeks",
        directory, len(categories), adoption.n_days, choices.n_customers, choices.n_weeks,
    )
    return DatasetBundle(adoption, features, choices, popularity, adoption_global)


def _adoption_frame(series: AdoptionSeries) -> pd.DataFrame:
    T, J = series.values.shape
    return pd.DataFrame({
        "category_id": np.repeat(series.categories, T),
        "day": np.tile(np.arange(T), J),
        "cumulative_adopters": series.values.T.ravel(),
    })


def write_bundle(bundle: DatasetBundle, directory: Path) -> List[Path]:
    """Write a bundle in the schemas load_bundle reads."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataValidationError(f"cannot create output directory: {e}", file=directory) from e

    frames = {
        "adoption.csv": _adoption_frame(bundle.adoption),
        "features.csv": pd.DataFrame({
            "category_id": bundle.features.category_id,
            "week": bundle.features.week,
            **{name: bundle.features.values[:, k] for k, name in enumerate(FEATURE_COLUMNS)},
        }),
        "choices.csv": pd.DataFrame({
            "customer_id": np.repeat(bundle.choices.customer_ids, bundle.choices.n_weeks),
            "week": np.tile(np.arange(bundle.choices.n_weeks), bundle.choices.n_customers),
            "choice": bundle.choices.choices.ravel(),
        }),
        "customers.csv": pd.DataFrame({
            "customer_id": bundle.choices.customer_ids,
            "tenure_days": bundle.choices.tenure,
        }),
        "popularity.csv": pd.DataFrame({
            "category_id": bundle.categories,
            "popularity": bundle.popularity,
        }),
    }
    if bundle.adoption_global is not None:
        frames["adoption_global.csv"] = _adoption_frame(bundle.adoption_global)

    written = []
    for name, frame in frames.items():
        path = directory / name
        try:
            frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
        except OSError as e:
            raise DataValidationError(f"cannot write file: {e}", file=path) from e
        written.append(path)
    return written
