import numpy as np
import pytest

from app.choice.mnl import ChoiceDesign
from app.config import SimulationSettings
from app.diffusion.model import DiffusionParams, SurCovariance, deterministic_path, observe
from app.factors import FEATURE_COLUMNS
from app.simulation import MixtureSpec, ScenarioSpec, draw_coefficients, simulate, simulate_choices, simulate_diffusion, simulate_features
from app.simulation.simulator import social_series

RAW = SimulationSettings(round_observations=False, monotone_observations=False)


def two_category_params():
    return DiffusionParams(
        p_inf=np.array([0.02, 0.03]), q_inf=np.array([0.05, 0.0]),
        p_imm=np.array([0.278, 0.05]), q_imm=np.array([0.191, 0.3]),
        M_inf=np.array([103.0, 50.0]), M_imm=np.array([1952.0, 800.0]),
        w=np.array([0.032, 0.5]), theta=np.array([0.044, 0.1]),
    )


class TestDiffusion:
    def test_zero_noise_follows_deterministic_path(self, rng):
        params = two_category_params()
        truth = simulate_diffusion(params, SurCovariance(np.zeros((4, 4)), np.zeros(2)), 80, rng, RAW)
        inf, imm = deterministic_path(params, 80)
        assert np.allclose(truth.c_inf, inf) and np.allclose(truth.c_imm, imm)
        assert np.allclose(truth.series.values, observe(inf, imm, params.theta))

    def test_observations_are_counts(self, rng):
        params = two_category_params()
        cov = SurCovariance.diagonal(np.full(4, 4.0), [100.0, 100.0])
        values = simulate_diffusion(params, cov, 60, rng).series.values
        assert np.all(values >= 0) and np.array_equal(values, np.round(values))
        assert np.all(np.diff(values, axis=0) >= 0)

    def test_latent_states_stay_within_markets(self, rng):
        params = two_category_params()
        cov = SurCovariance.diagonal(np.full(4, 1e4), [1.0, 1.0])
        truth = simulate_diffusion(params, cov, 100, rng, RAW)
        assert np.all(truth.c_inf <= params.M_inf) and np.all(truth.c_imm <= params.M_imm)
        assert np.all(np.diff(truth.c_imm, axis=0) >= 0)


class TestChoices:
    def test_very_negative_intercepts_choose_outside(self, rng):
        design = ChoiceDesign(3, rng.normal(size=(5, 3, 3)), np.ones((5, 3)))
        A = np.zeros((20, design.dim))
        A[:, :3] = -50.0
        panel = simulate_choices(A, design, np.full(20, 100.0), rng)
        assert np.all(panel.choices == 0)

    def test_dominant_category_is_chosen(self, rng):
        design = ChoiceDesign(2, np.zeros((4, 2, 3)))
        A = np.zeros((10, design.dim))
        A[:, 1] = 50.0
        panel = simulate_choices(A, design, np.full(10, 1.0), rng)
        assert np.all(panel.choices == 2)
        assert np.array_equal(panel.history[0], [0, 1, 2, 3])

    def test_degenerate_mixture_returns_means(self, rng):
        mixture = MixtureSpec([1.0], [[1.0, -2.0, 0.5]], np.zeros((1, 3, 3)), np.array([[0.1], [0.0], [0.2]]))
        z = rng.normal(size=(6, 1))
        A, labels = draw_coefficients(mixture, z, rng)
        assert np.all(labels == 0)
        assert np.allclose(A, mixture.means[0] + z @ mixture.delta.T)

    def test_mixture_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            MixtureSpec([0.5, 0.4], np.zeros((2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 1)))


class TestScenario:
    def test_same_seed_same_data(self):
        spec = ScenarioSpec.default(n_categories=2, n_days=30, n_weeks=4, n_customers=15, seed=11)
        a, b = simulate(spec), simulate(spec)
        assert np.array_equal(a.bundle.adoption.values, b.bundle.adoption.values)
        assert np.array_equal(a.bundle.choices.choices, b.bundle.choices.choices)
        assert np.array_equal(a.choices.coefficients, b.choices.coefficients)

    def test_bundle_shapes(self, scenario):
        bundle = scenario.bundle
        assert bundle.adoption.values.shape == (42, 3)
        assert bundle.adoption_global.values.shape == (42, 3)
        assert bundle.features.values.shape == (18, len(FEATURE_COLUMNS))
        assert bundle.choices.choices.shape == (40, 6)
        assert bundle.popularity.mean() == pytest.approx(1.0)
        assert scenario.choices.design.has_social

    def test_no_influence_scenario(self, scenario_none):
        assert not scenario_none.choices.design.has_social
        assert scenario_none.choices.coefficients.shape[1] == 3 + 1 + 3

    def test_feature_counts_add_up(self, rng):
        panel = simulate_features(2, 5, 0.05, rng)
        assert panel.invariant_violations() == []

    def test_social_series_selects_source(self, scenario):
        local = social_series("local-imitators", scenario.diffusion, scenario.global_diffusion, 6)
        global_ = social_series("global-adopters", scenario.diffusion, scenario.global_diffusion, 6)
        assert local.shape == global_.shape == (6, 3)
        assert social_series("none", scenario.diffusion, None, 6) is None
        with pytest.raises(ValueError):
            social_series("global-imitators", scenario.diffusion, None, 6)

    def test_mixture_dimension_checked(self):
        spec = ScenarioSpec.default(n_categories=2, n_days=30, n_weeks=4, n_customers=5)
        with pytest.raises(ValueError):
            ScenarioSpec(3, 30, 4, 5, spec.params, spec.cov, spec.mixture)

    def test_default_scenario_is_centred_on_ebooks(self):
        params = ScenarioSpec.default(n_categories=5, n_customers=5).params
        centre = {name: float(getattr(params, name)[2]) for name in ("p_imm", "q_imm", "M_inf", "M_imm", "w", "theta")}
        assert centre == pytest.approx(dict(p_imm=0.278, q_imm=0.191, M_inf=103.0, M_imm=1952.0, w=0.032, theta=0.044))
        assert np.allclose(params.M_imm / 1952.0, [0.8, 0.9, 1.0, 1.1, 1.2])
        single = ScenarioSpec.default(n_categories=1, n_customers=5).params
        assert single.p_imm[0] == pytest.approx(0.278) and single.M_inf[0] == pytest.approx(103.0)
