import numpy as np
import pytest
from scipy.optimize import least_squares

from app.config import SimulationSettings
from app.diffusion.genetic import GaConfig
from app.diffusion.mcem import ExpectedLogPosterior, McemConfig, default_prior, mcem_fit, sample_latent
from app.diffusion.model import AdoptionSeries, DiffusionParams, ParamLayout, SurCovariance, filter_latent, transform_params
from app.errors import DataValidationError
from app.simulation.simulator import ScenarioSpec, simulate_diffusion

from .conftest import small_config


def simulated_series(J=2, n_days=60, seed=0, noise=0.01):
    """eBooks-scale series from the default scenario with observation noise as a share of the plateau."""
    spec = ScenarioSpec.default(n_categories=J, n_days=n_days, n_customers=1, obs_noise=noise, seed=seed)
    truth = simulate_diffusion(spec.params, spec.cov, n_days, np.random.default_rng(seed))
    return spec.params, truth.series


def quick_config(**overrides):
    values = dict(iterations=2, samples=5, ga=GaConfig(population=8, generations=3), seed=1)
    values.update(overrides)
    return McemConfig(**values)


def test_fit_returns_best_iterate():
    _, data = simulated_series()
    prior = default_prior(np.array([0.8, 1.2]), data)
    fit = mcem_fit(data, prior, quick_config())
    assert fit.fit.log_map == pytest.approx(max(fit.fit.log_map_trace))
    assert np.isfinite(fit.fit.log_likelihood)
    assert fit.latent.c_imm.shape == data.values.shape
    assert fit.predictions.shape == data.values.shape
    assert len(fit.fit.objective_trace) == 2
    assert fit.fit.n_obs == data.values.size


def test_fit_is_deterministic():
    _, data = simulated_series(seed=4)
    prior = default_prior(np.ones(2), data)
    a = mcem_fit(data, prior, quick_config())
    b = mcem_fit(data, prior, quick_config())
    assert np.array_equal(a.vector, b.vector)


def test_full_search_without_profiling():
    _, data = simulated_series(J=1)
    prior = default_prior(np.ones(1), data)
    fit = mcem_fit(data, prior, quick_config(profile_covariance=False))
    assert np.isfinite(fit.fit.log_map)


def test_fixed_parameters_are_held():
    _, data = simulated_series(J=1)
    fit = mcem_fit(data, default_prior(np.ones(1), data), quick_config(fixed={"w": 0.25}))
    assert fit.params.w[0] == pytest.approx(0.25)


def test_identifiability_floor():
    _, data = simulated_series(n_days=20)
    with pytest.raises(DataValidationError):
        mcem_fit(data, default_prior(np.ones(2), data), quick_config())


def test_popularity_length_checked():
    _, data = simulated_series()
    prior = default_prior(np.ones(2), data)
    prior.popularity = np.ones(3)
    with pytest.raises(DataValidationError):
        mcem_fit(data, prior, quick_config())


def test_joint_paths_recover_state_covariance():
    params = DiffusionParams(
        p_inf=np.array([0.002, 0.003]), q_inf=np.array([0.005, 0.004]),
        p_imm=np.array([0.003, 0.002]), q_imm=np.array([0.01, 0.012]),
        M_inf=np.full(2, 1e5), M_imm=np.full(2, 1e5),
        w=np.array([0.3, 0.2]), theta=np.array([0.4, 0.5]),
    )
    W = np.diag([25.0, 16.0, 36.0, 9.0])
    raw = SimulationSettings(round_observations=False, monotone_observations=False)
    data = simulate_diffusion(params, SurCovariance(W, np.zeros(2)), 300, np.random.default_rng(8), raw).series

    out, _ = filter_latent(data, params, SurCovariance(W, np.full(2, 1e-2)))
    samples = sample_latent(out, 40, np.random.default_rng(9))
    target = ExpectedLogPosterior(samples, data, ParamLayout(2), np.ones(2))
    _, cov, _ = target.profile(transform_params(params))
    assert np.allclose(np.diag(cov.W), np.diag(W), rtol=0.3)


def test_from_config_reads_sections():
    config = small_config(mcem={"literal_transition": True}, ukf={"alpha": 0.5})
    cfg = McemConfig.from_config(config, seed=9)
    assert cfg.literal and cfg.tuning.alpha == 0.5 and cfg.seed == 9
    assert cfg.ga.population == 8


@pytest.mark.slow
def test_recovers_parameters_at_desk_scale():
    params, data = simulated_series(J=10, n_days=200, seed=20)
    prior = default_prior(params.M_imm / params.M_imm.mean(), data)
    cfg = McemConfig(iterations=20, samples=50, ga=GaConfig(population=64, generations=40), seed=20)
    fit = mcem_fit(data, prior, cfg)

    def rel(name):
        return np.abs(getattr(fit.params, name) - getattr(params, name)) / getattr(params, name)

    good = (rel("p_imm") < 0.2) & (rel("q_imm") < 0.2) & (rel("M_imm") < 0.15)
    assert good.sum() >= 8
    trace, se = np.array(fit.fit.objective_trace), np.array(fit.fit.objective_se)
    assert np.all(np.diff(trace) >= -2 * np.sqrt(se[1:] ** 2 + se[:-1] ** 2))


@pytest.mark.slow
def test_one_segment_matches_bass_least_squares():
    rng = np.random.default_rng(5)
    p, q, M = 0.03, 0.2, 1500.0
    y, c = [], 0.0
    for _ in range(120):
        c = c + (p + q * c / M) * (M - c)
        y.append(c + rng.normal(0, 5.0))
    data = AdoptionSeries([1], np.arange(120), np.array(y)[:, None])

    def bass_curve(theta):
        pp, qq, mm = theta
        out, cc = [], 0.0
        for _ in range(120):
            cc = cc + (pp + qq * cc / mm) * (mm - cc)
            out.append(cc)
        return np.array(out)

    nls = least_squares(lambda th: bass_curve(th) - data.values[:, 0], x0=[0.01, 0.1, 2000.0],
                        bounds=([1e-6, 1e-6, 100.0], [1.0, 2.0, 1e5]))
    cfg = McemConfig(iterations=10, samples=30, ga=GaConfig(population=48, generations=30), fixed={"theta": 0.0}, seed=5)
    fit = mcem_fit(data, default_prior(np.ones(1), data), cfg)
    rmse_fit = np.sqrt(np.mean((fit.predictions[:, 0] - data.values[:, 0]) ** 2))
    rmse_nls = np.sqrt(np.mean((bass_curve(nls.x) - data.values[:, 0]) ** 2))
    assert rmse_fit <= 1.05 * rmse_nls
