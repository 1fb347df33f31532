import json

import numpy as np
import pytest

from app import pipeline
from app.choice.mnl import loglik_all
from app.errors import NumericalError
from app.pipeline import MANIFEST, hash_arrays, recovery_records, run_all, stage_seed

from .conftest import small_config

COVARIATES = ["local-adopters", "none"]


@pytest.fixture(scope="module")
def finished(scenario, tmp_path_factory):
    output = tmp_path_factory.mktemp("run")
    run = run_all(scenario.bundle, small_config(covariates=COVARIATES), output)
    return run, output


def test_every_stage_reports(finished):
    run, output = finished
    assert set(run.diffusion) == {"local", "global"}
    assert set(run.choice) == set(COVARIATES)
    assert run.selected in COVARIATES
    for name in ("diffusion_comparison", "factor_loadings", "choice_comparison", "choice_population_none"):
        assert (output / f"{name}.json").exists()
    if run.selected != "none":
        assert (output / "policy_comparison.json").exists()
        assert (output / "optimal_policy.csv").exists()
        assert run.regression is not None


def test_manifest_hashes_match_files(finished, scenario):
    run, output = finished
    manifest = json.loads((output / MANIFEST).read_text())
    assert manifest["failed_stage"] is None and manifest["selected"] == run.selected
    for name, digest in manifest["artifacts"].items():
        assert pipeline.hash_file(output / name) == digest
    assert manifest["stages"]["factors"]["inputs"]["features"] == hash_arrays(scenario.bundle.features.values)


def test_comparison_rows_are_ranked_by_likelihood(finished):
    run, _ = finished
    values = [row["log_likelihood"] for row in run.comparison]
    assert values == sorted(values, reverse=True)
    assert [row["rank"] for row in run.comparison] == list(range(1, len(values) + 1))


def test_comparison_likelihood_is_plug_in(finished, scenario):
    run, _ = finished
    choices = scenario.bundle.choices
    for row in run.comparison:
        fit, design = run.choice[row["covariate"]], run.designs[row["covariate"]]
        X = design.build(choices.history)
        expected = float(np.sum(loglik_all(fit.posterior_mean, X, choices.choices)))
        assert row["log_likelihood"] == pytest.approx(expected)


def test_same_seed_same_artifacts(finished, scenario, tmp_path):
    run, _ = finished
    again = run_all(scenario.bundle, small_config(covariates=COVARIATES), tmp_path)
    assert again.artifacts == run.artifacts


def test_recovery_records(finished, scenario):
    run, _ = finished
    out = recovery_records(run, scenario)
    assert len(out["diffusion"]) == 3 and "p_imm_rel_error" in out["diffusion"][0]
    assert 0.0 <= out["choice"]["coclustering_accuracy"] <= 1.0
    assert out["generator"] == "local-adopters"


def test_failure_keeps_finished_reports(scenario, tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise NumericalError("chain diverged")

    monkeypatch.setattr(pipeline, "fit_choice", broken)
    with pytest.raises(NumericalError):
        run_all(scenario.bundle, small_config(covariates=["none"]), tmp_path, stages=("factors", "choice"))
    manifest = json.loads((tmp_path / MANIFEST).read_text())
    assert manifest["failed_stage"] == "choice" and "chain diverged" in manifest["error"]
    assert (tmp_path / "factor_loadings.json").exists()


def test_no_influence_only_skips_counterfactual(scenario_none):
    run = run_all(scenario_none.bundle, small_config(covariates=["none"]), stages=("factors", "choice", "comparison", "counterfactual"))
    assert run.selected == "none" and run.policy is None


def test_unknown_stage():
    with pytest.raises(ValueError):
        run_all(None, small_config(), stages=("diffusion", "bogus"))


def test_stage_seeds():
    assert stage_seed(1, "choice-none") == stage_seed(1, "choice-none")
    assert stage_seed(1, "choice-none") != stage_seed(1, "counterfactual")
    assert stage_seed(1, "factors") != stage_seed(2, "factors")
