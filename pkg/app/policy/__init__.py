from .counterfactual import (
    POLICY_NAMES,
    InfluencePolicy,
    PolicyReport,
    PolicyResult,
    RegressionResult,
    expected_adoption,
    optimize_policy,
    popularity_regression,
)

__all__ = [
    "POLICY_NAMES",
    "InfluencePolicy",
    "PolicyReport",
    "PolicyResult",
    "RegressionResult",
    "expected_adoption",
    "optimize_policy",
    "popularity_regression",
]
