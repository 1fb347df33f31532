import json

import numpy as np
import pytest

from app.choice.dpmixture import MixtureDraw
from app.choice.mnl import ChoiceDesign
from app.choice.sampler import ChoiceFit
from app.errors import DataValidationError
from app.io import emit_report, load_bundle, parameter_table, summarize, weekly_mean, write_bundle
from app.io.report import choice_comparison_record, customer_records, to_builtin

FEATURE_HEADER = "category_id,week,avg_file_size,featured_rate,avg_price,var_price,n_paid,n_free,free_paid_ratio,avg_tenure,n_total"


def write_fixture(directory, adoption=None):
    files = {
        "adoption.csv": adoption or "category_id,day,cumulative_adopters\n1,0,1\n1,1,2\n1,2,4\n",
        "features.csv": FEATURE_HEADER + "\n1,0,3.5,0.1,0.99,0.2,4,6,1.5,120,10\n",
        "choices.csv": "customer_id,week,choice\n7,0,1\n",
        "customers.csv": "customer_id,tenure_days\n7,365\n",
        "popularity.csv": "category_id,popularity\n1,1.0\n",
    }
    for name, text in files.items():
        (directory / name).write_text(text, encoding="utf-8")


def fake_choice_fit(names, covariate):
    d = len(names)
    draws = np.arange(2 * 3 * d, dtype=float).reshape(2, 3, d)
    mixture = MixtureDraw(np.zeros(3, dtype=int), np.zeros((1, d)), np.eye(d)[None], np.ones(1), np.zeros((d, 1)), 1.0, 1.0, d + 1.0, 1.0)
    return ChoiceFit(covariate, names, np.array([1, 2, 3]), draws, [mixture, mixture], np.zeros(4), 0.25, 1.0, -10.0, 12, draws[0])


class TestLoad:
    def test_hand_written_fixture(self, tmp_path):
        write_fixture(tmp_path)
        bundle = load_bundle(tmp_path)
        assert bundle.categories == [1]
        assert np.array_equal(bundle.adoption.values[:, 0], [1.0, 2.0, 4.0])
        assert np.array_equal(bundle.choices.customer_ids, [7])
        assert np.array_equal(bundle.choices.choices, [[1]])
        assert bundle.choices.tenure[0] == 365.0
        assert bundle.features.column("n_total")[0] == 10.0
        assert bundle.adoption_global is None

    def test_empty_file(self, tmp_path):
        write_fixture(tmp_path)
        (tmp_path / "adoption.csv").write_text("", encoding="utf-8")
        with pytest.raises(DataValidationError, match="empty"):
            load_bundle(tmp_path)

    def test_day_gap_reports_line(self, tmp_path):
        write_fixture(tmp_path, "category_id,day,cumulative_adopters\n1,0,1\n1,1,2\n1,3,4\n")
        with pytest.raises(DataValidationError) as info:
            load_bundle(tmp_path)
        assert info.value.line == 4 and info.value.column == "day"

    def test_decreasing_series(self, tmp_path):
        write_fixture(tmp_path, "category_id,day,cumulative_adopters\n1,0,3\n1,1,2\n1,2,4\n")
        assert np.array_equal(load_bundle(tmp_path).adoption.values[:, 0], [3.0, 3.0, 4.0])
        with pytest.raises(DataValidationError) as info:
            load_bundle(tmp_path, monotonize=False)
        assert info.value.line == 3

    def test_non_numeric_value(self, tmp_path):
        write_fixture(tmp_path, "category_id,day,cumulative_adopters\n1,0,1\n1,1,abc\n1,2,4\n")
        with pytest.raises(DataValidationError) as info:
            load_bundle(tmp_path)
        assert (info.value.line, info.value.column) == (3, "cumulative_adopters")

    def test_unknown_customer(self, tmp_path):
        write_fixture(tmp_path)
        (tmp_path / "choices.csv").write_text("customer_id,week,choice\n8,0,1\n", encoding="utf-8")
        with pytest.raises(DataValidationError, match="unknown id"):
            load_bundle(tmp_path)

    def test_missing_file(self, tmp_path):
        write_fixture(tmp_path)
        (tmp_path / "popularity.csv").unlink()
        with pytest.raises(DataValidationError, match="not found"):
            load_bundle(tmp_path)

    def test_simulated_round_trip(self, tmp_path, scenario):
        write_bundle(scenario.bundle, tmp_path)
        bundle = load_bundle(tmp_path)
        assert np.array_equal(bundle.adoption.values, scenario.bundle.adoption.values)
        assert np.array_equal(bundle.choices.choices, scenario.bundle.choices.choices)
        assert np.allclose(bundle.features.values, scenario.bundle.features.values)
        assert np.allclose(bundle.popularity, scenario.bundle.popularity)
        assert bundle.adoption_global is not None


def test_weekly_mean_repeats_last_day():
    daily = np.arange(10.0)[:, None]
    weekly = weekly_mean(daily, 3)
    assert np.allclose(weekly[:, 0], [3.0, 8.0, 9.0])


class TestReport:
    def test_summary_of_four_draws(self):
        summary = summarize([1.0, 2.0, 3.0, 4.0])
        assert summary["mean"] == 2.5
        assert summary["sd"] == pytest.approx(np.sqrt(5 / 3))
        assert summary["q025"] == pytest.approx(1.075)
        assert summary["q975"] == pytest.approx(3.925)

    def test_parameter_table(self):
        rows = parameter_table(np.array([[1.0, 5.0], [3.0, 5.0]]), ["a", "b"])
        assert [row["parameter"] for row in rows] == ["a", "b"]
        assert rows[1]["sd"] == 0.0

    def test_no_influence_record_lacks_social_coefficient(self):
        names = ChoiceDesign(10, np.zeros((2, 10, 3))).param_names
        record = choice_comparison_record(fake_choice_fit(names, "none"))
        assert "alpha_12" not in record and "alpha_11" in record
        assert record["n_params"] == 14 and record["mean_components"] == 1.0

    def test_customer_records(self):
        fit = fake_choice_fit(["x", "y"], "local-adopters")
        rows = customer_records(fit)
        assert len(rows) == 6
        assert rows[0]["mean"] == pytest.approx(fit.draws[:, 0, 0].mean())

    def test_to_builtin(self):
        value = to_builtin({"a": np.arange(3), "b": np.float64(np.nan), "c": (np.int64(2), np.bool_(True))})
        assert value == {"a": [0, 1, 2], "b": None, "c": [2, True]}

    def test_byte_identical_emission(self, tmp_path):
        tables = {"summary": [{"b": 2.0, "a": np.float64(1.5)}], "single": {"z": 1, "y": "text"}}
        for fmt in ("json", "csv"):
            first = emit_report(tables, tmp_path / f"one_{fmt}", fmt)
            second = emit_report(tables, tmp_path / f"two_{fmt}", fmt)
            assert [p.read_bytes() for p in first] == [p.read_bytes() for p in second]
        assert list(json.loads((tmp_path / "one_json" / "summary.json").read_text())[0]) == ["a", "b"]
        assert (tmp_path / "one_csv" / "single.csv").read_text().splitlines()[0] == "y,z"

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report({}, tmp_path, "xml")
