import numpy as np
import pytest

from app.choice import fit_choice, mh_rw_unit_step
from app.choice.mnl import ChoiceDesign
from app.choice.sampler import proposal_cholesky
from app.errors import DataValidationError


class TestProposal:
    def test_combines_curvature_and_prior(self, rng):
        B = rng.normal(size=(3, 3))
        H = B @ B.T
        V = np.diag([1.0, 2.0, 0.5])
        chol, fallback = proposal_cholesky(H, V)
        assert not fallback
        assert np.allclose(chol @ chol.T, np.linalg.inv(H + np.linalg.inv(V)))

    def test_falls_back_to_prior(self):
        V = np.diag([1.0, 4.0])
        chol, fallback = proposal_cholesky(-np.linalg.inv(V), V)
        assert fallback
        assert np.allclose(chol @ chol.T, V)


class TestUnitStep:
    def test_tiny_steps_are_accepted(self, rng):
        A = np.zeros(2)
        accepted = 0
        for _ in range(200):
            A, ok = mh_rw_unit_step(
                A, np.zeros(2), np.eye(2), np.zeros((2, 1)), np.zeros(1), lambda a: -float(a @ a), np.eye(2), 1e-16, rng
            )
            accepted += ok
        assert accepted >= 199

    def test_flat_likelihood_samples_the_prior(self, rng):
        mean, cov = np.array([1.0]), np.array([[4.0]])
        delta, z = np.array([[0.5]]), np.array([2.0])
        A, samples = np.zeros(1), []
        for _ in range(20000):
            A, _ = mh_rw_unit_step(A, mean, cov, delta, z, lambda a: 0.0, np.array([[2.0]]), 2.0, rng)
            samples.append(A[0])
        samples = np.array(samples[2000:])
        assert samples.mean() == pytest.approx(2.0, abs=0.15)
        assert samples.var() == pytest.approx(4.0, rel=0.15)


class TestFitChoice:
    def test_shapes_and_names(self, scenario, config):
        panel, design = scenario.bundle.choices, scenario.choices.design
        fit = fit_choice(panel, design, config, covariate="local-adopters", seed=1)
        assert fit.draws.shape == (10, panel.n_customers, design.dim)
        assert len(fit.mixture) == 10 and fit.loglik_trace.shape == (40,)
        assert fit.param_names == design.param_names
        assert 0.0 <= fit.acceptance_rate <= 1.0
        assert np.isfinite(fit.log_likelihood) and fit.log_likelihood < 0
        assert fit.column("alpha_5").shape == (10, panel.n_customers)
        assert fit.population_draws().shape == (10, design.dim)
        assert fit.delta_draws().shape == (10, design.dim, 1)
        assert all(1 <= k for k in fit.component_trace)

    def test_no_influence_variant(self, scenario, config):
        design = scenario.choices.design.with_social(None)
        fit = fit_choice(scenario.bundle.choices, design, config, covariate="none", seed=1)
        assert "alpha_5" not in fit.param_names and fit.draws.shape[2] == 7

    def test_same_seed_same_draws(self, scenario, config):
        panel, design = scenario.bundle.choices, scenario.choices.design
        a = fit_choice(panel, design, config, seed=5)
        b = fit_choice(panel, design, config, seed=5)
        assert np.array_equal(a.draws, b.draws)

    def test_category_mismatch(self, scenario, config):
        design = ChoiceDesign(2, np.zeros((6, 2, 3)))
        with pytest.raises(DataValidationError):
            fit_choice(scenario.bundle.choices, design, config)
