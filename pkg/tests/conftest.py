import numpy as np
import pytest

from app.config import PipelineConfig
from app.simulation import ScenarioSpec, simulate


def small_config(**sections) -> PipelineConfig:
    """Settings small enough for unit tests; sections override the defaults."""
    data = {
        "seed": 7,
        "ga": {"population": 8, "generations": 5},
        "mcem": {"iterations": 2, "samples": 5, "min_days": 30, "ga": {"population": 8, "generations": 3}},
        "mcmc": {"burn_in": 20, "keep": 20, "thin": 2, "hessian_rebuild": 10},
        "dp": {"grid_size": 16, "max_modal_clusters": 5},
        "policy": {"population": 8, "generations": 5, "n_draws": 5, "retries": 1},
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            data.setdefault(name, {}).update(values)
        else:
            data[name] = values
    return PipelineConfig.model_validate(data)


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def scenario():
    """Three categories, six weeks, forty customers; local adopters drive social influence."""
    spec = ScenarioSpec.default(n_categories=3, n_days=42, n_weeks=6, n_customers=40, seed=3)
    return simulate(spec)


@pytest.fixture(scope="session")
def scenario_none():
    spec = ScenarioSpec.default(n_categories=3, n_days=42, n_weeks=6, n_customers=40, social_source="none", seed=4)
    return simulate(spec)
