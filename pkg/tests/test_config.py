import json

import pytest

from app.config import COVARIATES, PipelineConfig, apply_overrides, load_config
from app.errors import ConfigError


def test_defaults():
    config = PipelineConfig()
    assert config.covariates == COVARIATES
    assert config.mcem.ga.generations == 40 and config.ga.population == 64
    assert config.fraclik.w == 0.05
    assert config.dp.cluster_law == "exact" and config.mcmc.mode_prior_var == 100.0


def test_file_then_overrides_then_seed(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 1, "mcmc": {"keep": 50, "thin": 5}}))
    config = load_config(path, ["mcmc.keep=80", "ukf.alpha=0.5"], seed=9)
    assert (config.seed, config.mcmc.keep, config.mcmc.thin, config.ukf.alpha) == (9, 80, 5, 0.5)


def test_override_values_are_json():
    data = apply_overrides({}, ['covariates=["none"]', "policy.resimulate_history=true", "dp.a_bounds=[0.1, 2]"])
    assert data == {"covariates": ["none"], "policy": {"resimulate_history": True}, "dp": {"a_bounds": [0.1, 2]}}


@pytest.mark.parametrize(
    "override",
    [
        "mcmc.keep=0",
        "mcmc.mode_prior_var=0",
        'dp.cluster_law="stirling"',
        "dp.a_bounds=[2, 1]",
        'covariates=["radio"]',
        "fraclik.w=1.0",
        "extra=1",
    ],
)
def test_invalid_values(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_malformed_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(path)


def test_override_into_scalar():
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 3}, ["seed.value=1"])
