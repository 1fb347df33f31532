"""
Report records and their emission.

Every table is a list of flat records written with sorted keys, so reruns with
the same seed produce byte-identical files. Quantiles use linear interpolation
between order statistics; standard deviations use ddof=1.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence

import numpy as np
import pandas as pd

from app.choice.sampler import ChoiceFit
from app.diffusion.mcem import DiffusionFit
from app.diffusion.model import PARAM_NAMES, AdoptionSeries
from app.errors import DataValidationError
from app.factors.analysis import FactorSolution

logger = logging.getLogger(__name__)

FORMATS = ("json", "csv")


def to_builtin(value: Any) -> Any:
    """Recursively convert numpy containers and scalars to JSON-friendly Python values."""
    if isinstance(value, Mapping):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def summarize(draws: np.ndarray) -> Dict[str, float]:
    """Posterior mean, SD and 2.5 / 97.5 percentiles of a 1-D sample."""
    draws = np.asarray(draws, dtype=float).ravel()
    return {
        "mean": float(np.mean(draws)),
        "sd": float(np.std(draws, ddof=1)) if draws.size > 1 else 0.0,
        "q025": float(np.quantile(draws, 0.025, method="linear")),
        "q975": float(np.quantile(draws, 0.975, method="linear")),
    }


def parameter_table(draws: np.ndarray, names: Sequence[str]) -> List[dict]:
    """One summary record per column of a (draws, parameters) array."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    return [{"parameter": name, **summarize(draws[:, k])} for k, name in enumerate(names)]


def diffusion_comparison_records(fits: Mapping[str, DiffusionFit]) -> List[dict]:
    return [
        {
            "sample": scope,
            "log_likelihood": fit.fit.log_likelihood,
            "log_map": fit.fit.log_map,
            "n_obs": fit.fit.n_obs,
            "mad": float(np.mean(fit.fit.mad)),
            "mse": float(np.mean(fit.fit.mse)),
            "converged": fit.fit.converged,
        }
        for scope, fit in fits.items()
    ]


def diffusion_parameter_records(fit: DiffusionFit, scope: str) -> List[dict]:
    records = []
    for j, cat in enumerate(fit.latent.categories):
        row = {"sample": scope, "category_id": int(cat)}
        row.update({name: float(getattr(fit.params, name)[j]) for name in PARAM_NAMES})
        row["state_var_inf"] = float(fit.cov.W[2 * j, 2 * j])
        row["state_var_imm"] = float(fit.cov.W[2 * j + 1, 2 * j + 1])
        row["obs_var"] = float(fit.cov.V[j])
        row["mad"] = float(fit.fit.mad[j])
        row["mse"] = float(fit.fit.mse[j])
        records.append(row)
    return records


def forecast_records(fit: DiffusionFit, data: AdoptionSeries, scope: str) -> List[dict]:
    """Per category-day observed series, one-step-ahead prediction and filtered imitators."""
    records = []
    for j, cat in enumerate(data.categories):
        for t in range(data.n_days):
            records.append({
                "sample": scope,
                "category_id": int(cat),
                "day": int(data.days[t]),
                "observed": float(data.values[t, j]),
                "predicted": float(fit.predictions[t, j]),
                "c_inf": float(fit.latent.c_inf[t, j]),
                "c_imm": float(fit.latent.c_imm[t, j]),
            })
    return records


def factor_records(solution: FactorSolution) -> List[dict]:
    records = [
        {"variable": name, **{f"factor_{k + 1}": float(solution.loadings[r, k]) for k in range(solution.loadings.shape[1])},
         "communality": float(solution.communalities[r])}
        for r, name in enumerate(solution.columns)
    ]
    records.append({"variable": "variance_explained", "value": solution.variance_explained})
    return records


def choice_comparison_record(fit: ChoiceFit) -> dict:
    """Model-comparison row; coefficients absent from the variant are absent from the record."""
    population = fit.population_draws().mean(axis=0)
    return {
        "covariate": fit.covariate,
        "log_likelihood": fit.log_likelihood,
        "n_obs": fit.n_obs,
        "n_params": len(fit.param_names),
        "acceptance_rate": fit.acceptance_rate,
        "mean_components": float(np.mean([m.n_components for m in fit.mixture])),
        **{name: float(population[k]) for k, name in enumerate(fit.param_names)},
    }


def population_records(fit: ChoiceFit) -> List[dict]:
    return [{"covariate": fit.covariate, **row} for row in parameter_table(fit.population_draws(), fit.param_names)]


def customer_records(fit: ChoiceFit) -> List[dict]:
    records = []
    for i, cid in enumerate(fit.customer_ids):
        for k, name in enumerate(fit.param_names):
            column = fit.draws[:, i, k]
            records.append({
                "covariate": fit.covariate,
                "customer_id": int(cid),
                "parameter": name,
                "mean": float(np.mean(column)),
                "q025": float(np.quantile(column, 0.025, method="linear")),
                "q975": float(np.quantile(column, 0.975, method="linear")),
            })
    return records


def delta_records(fit: ChoiceFit) -> List[dict]:
    deltas = fit.delta_draws()
    if deltas.size == 0:
        return []
    records = []
    for q in range(deltas.shape[2]):
        for row in parameter_table(deltas[:, :, q], fit.param_names):
            records.append({"covariate": fit.covariate, "regressor": "tenure" if q == 0 else f"z_{q + 1}", **row})
    return records


def emit_report(tables: Mapping[str, Any], directory: Path, fmt: str = "json") -> List[Path]:
    """
    Write each table to ``directory/<name>.<fmt>``.

    Args:
        tables: Table name to records (list of dicts) or a single record
        directory: Output folder, created when missing
        fmt: "json" (sorted keys, two-space indent) or "csv" (columns sorted)

    Returns:
        Written paths in table-name order
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataValidationError(f"cannot create report directory: {e}", file=directory) from e

    written = []
    for name in sorted(tables):
        records = to_builtin(tables[name])
        path = directory / f"{name}.{fmt}"
        try:
            if fmt == "json":
                path.write_text(json.dumps(records, sort_keys=True, indent=2) + "\n", encoding="utf-8")
            else:
                rows = records if isinstance(records, list) else [records]
                frame = pd.DataFrame(rows)
                frame = frame[sorted(frame.columns)]
                frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
        except OSError as e:
            raise DataValidationError(f"cannot write report: {e}", file=path) from e
        written.append(path)
    logger.info("wrote %d report files to %s", len(written), directory)
    return written
