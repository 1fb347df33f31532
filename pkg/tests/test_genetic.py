import numpy as np
import pytest

from app.config import GaSettings
from app.diffusion.genetic import GaConfig, genetic_optimize
from app.errors import InitializationError


def neg_sphere(x):
    return -float(np.sum(x ** 2))


def neg_rosenbrock(x):
    return -float((1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2)


def test_sphere_optimum():
    result = genetic_optimize(neg_sphere, np.full(5, 1.0), GaConfig(generations=200, init_spread=1.0, seed=1))
    assert result.best_value >= -1e-2


def test_rosenbrock():
    result = genetic_optimize(neg_rosenbrock, np.zeros(2), GaConfig(population=64, generations=500, init_spread=1.0, seed=2))
    assert result.best_value >= -1e-1


def test_trace_is_non_decreasing():
    for seed in range(5):
        result = genetic_optimize(neg_rosenbrock, np.zeros(2), GaConfig(population=8, generations=30, seed=seed))
        assert np.all(np.diff(result.trace) >= 0)
        assert result.trace.shape == (31,)


def test_same_seed_same_result():
    cfg = GaConfig(population=10, generations=20, seed=11)
    a = genetic_optimize(neg_sphere, np.ones(3), cfg)
    b = genetic_optimize(neg_sphere, np.ones(3), cfg)
    assert np.array_equal(a.best, b.best) and np.array_equal(a.trace, b.trace)


def test_parallel_matches_serial():
    serial = genetic_optimize(neg_sphere, np.ones(3), GaConfig(population=10, generations=5, seed=3))
    parallel = genetic_optimize(neg_sphere, np.ones(3), GaConfig(population=10, generations=5, seed=3, n_jobs=2))
    assert np.array_equal(serial.best, parallel.best)


def test_seeds_enter_population():
    def peak(x):
        return 1.0 if np.allclose(x, 5.0) else -float(np.sum((x - 5.0) ** 2))

    result = genetic_optimize(peak, np.zeros(2), GaConfig(population=6, generations=1, seed=0), seeds=[np.full(2, 5.0)])
    assert result.best_value == 1.0


def test_all_failures_raise():
    with pytest.raises(InitializationError):
        genetic_optimize(lambda x: float("nan"), np.zeros(2), GaConfig(population=4, generations=1))


def test_config_validation():
    with pytest.raises(ValueError):
        GaConfig(population=3)
    with pytest.raises(ValueError):
        GaConfig(population=4, elite=4)


def test_from_settings_overrides():
    cfg = GaConfig.from_settings(GaSettings(population=16), seed=5, generations=7)
    assert (cfg.population, cfg.generations, cfg.seed) == (16, 7, 5)
