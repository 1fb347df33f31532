import numpy as np
import pytest

from app.choice.mnl import ChoiceDesign, choice_prob
from app.choice.sampler import ChoiceFit
from app.config import GaSettings, PolicySettings
from app.errors import ConfigError, DegenerateInputError
from app.policy import InfluencePolicy, expected_adoption, optimize_policy, popularity_regression
from app.policy.counterfactual import decode_policy, encode_policy


def fake_fit(draws, design):
    n, I, _ = draws.shape
    return ChoiceFit(
        covariate="local-imitators",
        param_names=design.param_names,
        customer_ids=np.arange(I),
        draws=draws,
        mixture=[],
        loglik_trace=np.zeros(n),
        acceptance_rate=0.3,
        proposal_scale=1.0,
        log_likelihood=-1.0,
        n_obs=I * design.n_weeks,
        unit_modes=draws[0],
        component_trace=[],
    )


def small_problem(rng, social_coef=0.05, J=3, T=4, I=5, n_draws=3):
    design = ChoiceDesign(J, rng.normal(size=(T, J, 3)), np.cumsum(rng.uniform(0, 2, size=(T, J)), axis=0))
    draws = 0.3 * rng.normal(size=(n_draws, I, design.dim))
    draws[..., :J] -= 1.0
    draws[..., design.social_index] = social_coef
    history = np.tile(np.arange(T), (I, 1))
    return design, draws, history


POLICY = PolicySettings(population=8, generations=5, n_draws=5, retries=1)


class TestPolicy:
    def test_rejects_decreasing(self):
        with pytest.raises(ValueError):
            InfluencePolicy([[1.0, 0.5]])
        with pytest.raises(ValueError):
            InfluencePolicy([[-1.0, 0.5]])

    def test_from_baseline_is_running_max(self):
        policy = InfluencePolicy.from_baseline(np.array([[1.0, 2.0], [0.5, 3.0], [2.0, 1.0]]))
        assert np.array_equal(policy.c, [[1.0, 1.0, 2.0], [2.0, 3.0, 3.0]])

    def test_decoded_policies_are_monotone_and_capped(self, rng):
        upper = np.array([2.0, 5.0, 0.5])
        for _ in range(50):
            policy = decode_policy(rng.normal(scale=3.0, size=12), upper, 4)
            assert np.all(np.diff(policy.c, axis=1) >= 0)
            assert np.all(policy.c <= upper[:, None] + 1e-12)

    def test_encode_decode_recovers_policy(self):
        upper = np.array([4.0, 2.0])
        policy = InfluencePolicy([[1.0, 1.0, 3.0], [0.5, 1.5, 2.0]])
        assert np.allclose(decode_policy(encode_policy(policy, upper), upper, 3).c, policy.c)


class TestExpectedAdoption:
    def test_single_customer_hand_value(self):
        design = ChoiceDesign(1, np.zeros((1, 1, 3)), np.ones((1, 1)))
        draws = np.zeros((1, 1, design.dim))
        draws[0, 0, 0], draws[0, 0, 2] = 0.5, 0.2
        total, per_cat = expected_adoption(InfluencePolicy([[2.0]]), draws, design, np.zeros((1, 1)))
        assert total == pytest.approx(np.exp(0.9) / (1 + np.exp(0.9)))
        assert per_cat.shape == (1,)

    def test_dead_covariate(self, rng):
        design, draws, history = small_problem(rng, social_coef=0.0)
        low, _ = expected_adoption(InfluencePolicy(np.zeros((3, 4))), draws, design, history)
        high, _ = expected_adoption(InfluencePolicy(np.full((3, 4), 50.0)), draws, design, history)
        assert low == pytest.approx(high)

    def test_shutdown_matches_model_without_influence(self, rng):
        design, draws, history = small_problem(rng)
        total, _ = expected_adoption(InfluencePolicy(np.zeros((3, 4))), draws, design, history)
        plain = design.with_social(None)
        keep = [c for c in range(design.dim) if c != design.social_index]
        X = plain.build(history)
        inside = choice_prob(np.einsum("itjd,nid->nitj", X, draws[..., keep]))[..., 1:]
        assert total == pytest.approx(inside.sum(axis=(1, 2, 3)).mean())

    def test_resimulated_history_differs(self, rng):
        design, draws, history = small_problem(rng)
        draws[..., design.n_categories] = 0.5
        policy = InfluencePolicy.from_baseline(design.social)
        fixed, _ = expected_adoption(policy, draws, design, history)
        evolved, _ = expected_adoption(policy, draws, design, history, resimulate_history=True)
        assert fixed != pytest.approx(evolved)

    def test_requires_social_coefficient(self, rng):
        design, draws, history = small_problem(rng)
        with pytest.raises(ConfigError):
            expected_adoption(InfluencePolicy(np.zeros((3, 4))), draws[..., :-1], design.with_social(None), history)


class TestOptimizePolicy:
    def test_positive_influence_hits_the_cap(self, rng):
        design, draws, history = small_problem(rng, social_coef=0.2)
        result = optimize_policy(fake_fit(draws, design), design, history, [1, 2, 3], POLICY, GaSettings(), seed=0)
        assert np.allclose(result.policy.c, result.report.upper[:, None])
        assert result.report.improved

    def test_never_worse_than_comparisons(self, rng):
        for coef in (-0.3, 0.0, 0.1):
            design, draws, history = small_problem(rng, social_coef=coef)
            report = optimize_policy(fake_fit(draws, design), design, history, [1, 2, 3], POLICY, GaSettings(), seed=1).report
            for name in ("baseline", "shutdown", "plus_1pct", "minus_1pct"):
                assert report.totals["optimal"] >= report.totals[name] - 1e-9

    def test_report_records(self, rng):
        design, draws, history = small_problem(rng)
        report = optimize_policy(fake_fit(draws, design), design, history, [4, 5, 6], POLICY, GaSettings(), seed=2).report
        rows = report.records()
        assert [row["category_id"] for row in rows] == [4, 5, 6, "total"]
        assert rows[-1]["optimal"] == pytest.approx(sum(row["optimal"] for row in rows[:-1]))
        assert report.improvement.shape == (3,)


class TestPopularityRegression:
    def test_matches_normal_equations(self):
        ranks = np.array([1.0, 2.0, 3.0, 4.0])
        gains = np.array([2.0, 3.5, 3.0, 6.0])
        X = np.column_stack([np.ones(4), ranks])
        beta = np.linalg.solve(X.T @ X, X.T @ gains)
        result = popularity_regression(gains, ranks)
        assert result.intercept == pytest.approx(beta[0], abs=1e-10)
        assert result.slope == pytest.approx(beta[1], abs=1e-10)
        assert result.n_obs == 4 and 0 <= result.r_squared <= 1

    def test_permutation_invariant(self, rng):
        ranks, gains = np.arange(1.0, 11.0), rng.normal(size=10)
        order = rng.permutation(10)
        a, b = popularity_regression(gains, ranks), popularity_regression(gains[order], ranks[order])
        assert a.slope == pytest.approx(b.slope) and a.intercept == pytest.approx(b.intercept)

    def test_too_few_categories(self):
        with pytest.raises(DegenerateInputError):
            popularity_regression(np.array([1.0, 2.0]), np.array([1.0, 2.0]))

    def test_constant_ranks(self):
        with pytest.raises(DegenerateInputError):
            popularity_regression(np.array([1.0, 2.0, 3.0]), np.ones(3))
