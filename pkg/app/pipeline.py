"""
End-to-end orchestration: diffusion -> factors -> choice variants -> comparison -> counterfactual.

Each stage records hashes of exactly the arrays it consumed. A failing stage
stops everything downstream; reports for the stages that finished are still
written before the error propagates.
"""
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from app.choice.dpmixture import coclustering_accuracy
from app.choice.mnl import ChoiceDesign
from app.choice.sampler import ChoiceFit, fit_choice
from app.config import COVARIATES, PipelineConfig
from app.diffusion.mcem import DiffusionFit, McemConfig, default_prior, mcem_fit
from app.errors import SocialDiffError
from app.factors.analysis import FactorSolution, extract_factors, scores_by_category_week
from app.io.bundle import DatasetBundle, weekly_mean
from app.io.report import (
    choice_comparison_record,
    customer_records,
    delta_records,
    diffusion_comparison_records,
    diffusion_parameter_records,
    emit_report,
    factor_records,
    forecast_records,
    population_records,
    to_builtin,
)
from app.policy.counterfactual import PolicyResult, optimize_policy, popularity_regression

logger = logging.getLogger(__name__)

STAGES = ("diffusion", "factors", "choice", "comparison", "counterfactual")
MANIFEST = "manifest.json"


def hash_arrays(*arrays: Any) -> str:
    digest = hashlib.sha256()
    for array in arrays:
        if array is None:
            digest.update(b"none")
            continue
        data = np.ascontiguousarray(np.asarray(array, dtype=float))
        digest.update(str(data.shape).encode())
        digest.update(data.tobytes())
    return digest.hexdigest()


def hash_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class StageRecord:
    name: str
    input_hashes: Dict[str, str]
    seconds: float = 0.0
    seed: Optional[int] = None


@dataclass
class PipelineRun:
    config: Dict[str, Any]
    stages: Dict[str, StageRecord] = field(default_factory=dict)
    seeds: Dict[str, int] = field(default_factory=dict)
    diffusion: Dict[str, DiffusionFit] = field(default_factory=dict)
    factors: Optional[FactorSolution] = None
    choice: Dict[str, ChoiceFit] = field(default_factory=dict)
    designs: Dict[str, ChoiceDesign] = field(default_factory=dict)
    comparison: List[dict] = field(default_factory=list)
    selected: Optional[str] = None
    policy: Optional[PolicyResult] = None
    regression: Optional[dict] = None
    tables: Dict[str, Any] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    failed_stage: Optional[str] = None
    error: Optional[str] = None

    def record(self, name: str, started: float, seed: Optional[int] = None, **inputs: Any) -> None:
        self.stages[name] = StageRecord(name, {k: hash_arrays(*v) if isinstance(v, tuple) else hash_arrays(v) for k, v in inputs.items()},
                                        time.perf_counter() - started, seed)


def stage_seed(base: int, stage: str) -> int:
    """Per-stage seed derived from the run seed and the stage name."""
    return int(np.random.SeedSequence([base, *stage.encode()]).generate_state(1)[0])


def social_covariate(covariate: str, bundle: DatasetBundle, diffusion: Dict[str, DiffusionFit]) -> Optional[np.ndarray]:
    """Weekly social-influence series for a choice variant; daily series are aggregated here only."""
    if covariate == "none":
        return None
    scope, measure = covariate.split("-")
    if measure == "adopters":
        return bundle.weekly_adopters(scope)
    if scope not in diffusion:
        raise SocialDiffError(f"covariate {covariate} needs the {scope} diffusion fit")
    return weekly_mean(diffusion[scope].latent.c_imm, bundle.n_weeks)


def bias_delta_records(reference: ChoiceFit, selected: ChoiceFit) -> List[dict]:
    """Shift in population-mean coefficients when the social covariate is added."""
    base = dict(zip(reference.param_names, reference.population_draws().mean(axis=0)))
    full = dict(zip(selected.param_names, selected.population_draws().mean(axis=0)))
    return [
        {
            "parameter": name,
            "without_social": float(base[name]),
            "with_social": float(full[name]),
            "shift": float(full[name] - base[name]),
            "selected_covariate": selected.covariate,
        }
        for name in reference.param_names if name in full
    ]


def _diffusion_stage(run: PipelineRun, bundle: DatasetBundle, config: PipelineConfig) -> None:
    scopes = ["local"] + (["global"] if bundle.adoption_global is not None else [])
    for scope in scopes:
        started = time.perf_counter()
        data = bundle.adoption_for(scope)
        seed = stage_seed(config.seed, f"diffusion-{scope}")
        cfg = McemConfig.from_config(config, seed=seed)
        prior = default_prior(bundle.popularity, data, cfg.market_scale)
        run.diffusion[scope] = mcem_fit(data, prior, cfg)
        run.seeds[f"diffusion-{scope}"] = seed
        run.record(f"diffusion-{scope}", started, seed, adoption=data.values, popularity=bundle.popularity)
        fit = run.diffusion[scope]
        logger.info("diffusion[%s]: log-lik %.3f, MAD %.3f", scope, fit.fit.log_likelihood, float(np.mean(fit.fit.mad)))

    run.tables["diffusion_comparison"] = diffusion_comparison_records(run.diffusion)
    run.tables["diffusion_parameters"] = [row for s, f in run.diffusion.items() for row in diffusion_parameter_records(f, s)]
    run.tables["diffusion_forecast"] = [
        row for s, f in run.diffusion.items() for row in forecast_records(f, bundle.adoption_for(s), s)
    ]


def _factor_stage(run: PipelineRun, bundle: DatasetBundle) -> np.ndarray:
    started = time.perf_counter()
    run.factors = extract_factors(bundle.features, 3)
    run.record("factors", started, features=bundle.features.values)
    run.tables["factor_loadings"] = factor_records(run.factors)
    return scores_by_category_week(run.factors, bundle.features, bundle.categories, bundle.n_weeks)


def _choice_stage(
    run: PipelineRun,
    bundle: DatasetBundle,
    config: PipelineConfig,
    scores: np.ndarray,
    covariates: Sequence[str],
    progress: bool,
) -> None:
    for covariate in covariates:
        if covariate.startswith("global") and bundle.adoption_global is None:
            logger.warning("skipping %s: no global adoption series in the bundle", covariate)
            continue
        started = time.perf_counter()
        social = social_covariate(covariate, bundle, run.diffusion)
        design = ChoiceDesign(len(bundle.categories), scores, social)
        seed = stage_seed(config.seed, f"choice-{covariate}")
        run.choice[covariate] = fit_choice(bundle.choices, design, config, covariate, seed=seed, progress=progress)
        run.designs[covariate] = design
        run.seeds[f"choice-{covariate}"] = seed
        run.record(
            f"choice-{covariate}", started, seed,
            choices=bundle.choices.choices, tenure=bundle.choices.tenure, factors=scores, social=social,
        )
        fit = run.choice[covariate]
        run.tables[f"choice_population_{covariate}"] = population_records(fit)
        run.tables[f"choice_customers_{covariate}"] = customer_records(fit)
        run.tables[f"choice_delta_{covariate}"] = delta_records(fit)


def _comparison_stage(run: PipelineRun) -> None:
    started = time.perf_counter()
    rows = [choice_comparison_record(fit) for fit in run.choice.values()]
    rows.sort(key=lambda r: (-r["log_likelihood"], r["covariate"]))
    for rank, row in enumerate(rows, start=1):
        row["rank"] = rank
    run.comparison = rows
    run.tables["choice_comparison"] = rows
    if rows:
        run.selected = rows[0]["covariate"]
    run.record("comparison", started, log_likelihoods=np.array([r["log_likelihood"] for r in rows]))

    if "none" in run.choice and run.selected not in (None, "none"):
        run.tables["bias_delta"] = bias_delta_records(run.choice["none"], run.choice[run.selected])


def _counterfactual_stage(run: PipelineRun, bundle: DatasetBundle, config: PipelineConfig) -> None:
    if run.selected is None or run.selected == "none":
        logger.warning("no social-influence variant selected; counterfactual stage skipped")
        return
    started = time.perf_counter()
    fit, design = run.choice[run.selected], run.designs[run.selected]
    seed = stage_seed(config.seed, "counterfactual")
    history = bundle.choices.history
    run.policy = optimize_policy(fit, design, history, bundle.categories, config.policy, config.ga, seed)
    run.seeds["counterfactual"] = seed
    run.record("counterfactual", started, seed, draws=fit.draws, social=design.social, history=history)
    run.tables["policy_comparison"] = run.policy.report.records()

    if len(bundle.categories) >= 3 and np.ptp(bundle.popularity) > 0:
        ranks = rankdata(-bundle.popularity, method="average")
        run.regression = popularity_regression(run.policy.report.improvement, ranks).record()
        run.tables["popularity_regression"] = run.regression
    else:
        logger.warning("popularity regression skipped: needs >= 3 categories with distinct popularity")


def policy_trajectory_records(run: PipelineRun, bundle: DatasetBundle) -> List[dict]:
    policy = run.policy.policy
    baseline = run.designs[run.selected].social
    return [
        {
            "category_id": int(cat),
            "week": t,
            "baseline": float(baseline[t, j]),
            "optimal": float(policy.c[j, t]),
        }
        for j, cat in enumerate(bundle.categories)
        for t in range(policy.n_weeks)
    ]


def write_outputs(run: PipelineRun, bundle: DatasetBundle, output_dir: Path, fmt: str = "json") -> List[Path]:
    """Emit every table plus the optimal trajectory CSV and the manifest."""
    output_dir = Path(output_dir)
    paths = emit_report(run.tables, output_dir, fmt)
    if run.policy is not None:
        paths += emit_report({"optimal_policy": policy_trajectory_records(run, bundle)}, output_dir, "csv")
    run.artifacts = {p.name: hash_file(p) for p in sorted(paths)}
    manifest = {
        "artifacts": run.artifacts,
        "config": run.config,
        "seeds": run.seeds,
        "selected": run.selected,
        "failed_stage": run.failed_stage,
        "error": run.error,
        "stages": {name: {"inputs": rec.input_hashes, "seed": rec.seed} for name, rec in sorted(run.stages.items())},
    }
    manifest_path = output_dir / MANIFEST
    manifest_path.write_text(json.dumps(to_builtin(manifest), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return paths + [manifest_path]


def run_all(
    bundle: DatasetBundle,
    config: PipelineConfig,
    output_dir: Optional[Path] = None,
    stages: Sequence[str] = STAGES,
    progress: bool = False,
    fmt: str = "json",
) -> PipelineRun:
    """
    Run the requested stages in dependency order.

    Args:
        bundle: Validated inputs
        config: Run configuration
        output_dir: Where reports and the manifest go (nothing written when None)
        stages: Subset of STAGES to run; prerequisites are not added implicitly
        progress: Show MCMC progress bars
        fmt: Report format for the tables

    Returns:
        PipelineRun with every stage output
    """
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages: {unknown}")
    run = PipelineRun(config=config.model_dump(mode="json"))
    covariates = [c for c in COVARIATES if c in config.covariates]
    current = None
    try:
        if "diffusion" in stages:
            current = "diffusion"
            _diffusion_stage(run, bundle, config)
        scores = None
        if "factors" in stages or "choice" in stages:
            current = "factors"
            scores = _factor_stage(run, bundle)
        if "choice" in stages:
            current = "choice"
            _choice_stage(run, bundle, config, scores, covariates, progress)
        if "comparison" in stages:
            current = "comparison"
            _comparison_stage(run)
        if "counterfactual" in stages:
            current = "counterfactual"
            _counterfactual_stage(run, bundle, config)
    except SocialDiffError as e:
        run.failed_stage, run.error = current, str(e)
        logger.error("stage %s failed: %s", current, e)
        if output_dir is not None:
            write_outputs(run, bundle, output_dir, fmt)
        raise

    if output_dir is not None:
        write_outputs(run, bundle, output_dir, fmt)
    return run


def recovery_records(run: PipelineRun, truth) -> Dict[str, Any]:
    """Compare a pipeline run on simulated data with the generator's ground truth."""
    out: Dict[str, Any] = {}
    if "local" in run.diffusion:
        fitted, actual = run.diffusion["local"].params, truth.spec.params
        rows = []
        for j in range(actual.n_categories):
            row = {"category_id": j + 1}
            for name in ("p_imm", "q_imm", "M_imm"):
                true_value = float(getattr(actual, name)[j])
                estimate = float(getattr(fitted, name)[j])
                row[name] = estimate
                row[f"{name}_true"] = true_value
                row[f"{name}_rel_error"] = abs(estimate - true_value) / abs(true_value)
            rows.append(row)
        out["diffusion"] = rows
    source = truth.spec.social_source
    if source in run.choice:
        fit = run.choice[source]
        out["choice"] = {
            "covariate": source,
            "coclustering_accuracy": float(np.mean([coclustering_accuracy(truth.choices.labels, m.indicators) for m in fit.mixture])),
            "coefficient_rmse": float(np.sqrt(np.mean((fit.posterior_mean - truth.choices.coefficients) ** 2))),
        }
    out["selected"] = run.selected
    out["generator"] = source
    return out
