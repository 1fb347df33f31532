from .analysis import FEATURE_COLUMNS, FactorSolution, FeaturePanel, extract_factors, scores_by_category_week, varimax

__all__ = ["FEATURE_COLUMNS", "FactorSolution", "FeaturePanel", "extract_factors", "scores_by_category_week", "varimax"]
