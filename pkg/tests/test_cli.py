import json

import pytest

from app.cli import main
from app.errors import EXIT_DATA, EXIT_OK, EXIT_USAGE

SMALL = ["--categories", "3", "--days", "35", "--weeks", "5", "--customers", "12"]


@pytest.fixture
def bundle_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["simulate", *SMALL, "--seed", "3", "--output-dir", str(out)]) == EXIT_OK
    return out


def test_simulate_writes_bundle_and_truth(bundle_dir):
    for name in ("adoption.csv", "adoption_global.csv", "features.csv", "choices.csv", "customers.csv", "popularity.csv"):
        assert (bundle_dir / name).exists()
    truth = json.loads((bundle_dir / "truth.json").read_text())
    assert truth["social_source"] == "local-adopters" and len(truth["labels"]) == 12


def test_fit_factors_then_report(bundle_dir, tmp_path, capsys):
    out = tmp_path / "reports"
    assert main(["fit-factors", "--data-dir", str(bundle_dir), "--output-dir", str(out)]) == EXIT_OK
    assert (out / "factor_loadings.json").exists()
    assert main(["report", "--output-dir", str(out)]) == EXIT_OK
    assert "artifacts verified" in capsys.readouterr().out

    (out / "factor_loadings.json").write_text("[]\n")
    assert main(["report", "--output-dir", str(out)]) == EXIT_DATA


def test_csv_reports(bundle_dir, tmp_path):
    out = tmp_path / "csv"
    assert main(["fit-factors", "--data-dir", str(bundle_dir), "--output-dir", str(out), "--format", "csv"]) == EXIT_OK
    assert (out / "factor_loadings.csv").exists()


def test_missing_data_directory(tmp_path):
    code = main(["fit-factors", "--data-dir", str(tmp_path / "nowhere"), "--output-dir", str(tmp_path / "out")])
    assert code == EXIT_DATA


def test_report_without_manifest(tmp_path):
    assert main(["report", "--output-dir", str(tmp_path)]) == EXIT_DATA


def test_bad_override(bundle_dir, tmp_path):
    args = ["fit-factors", "--data-dir", str(bundle_dir), "--output-dir", str(tmp_path)]
    assert main([*args, "--set", "mcmc.keep=0"]) == EXIT_USAGE
    assert main([*args, "--set", "nokeyvalue"]) == EXIT_USAGE
    assert main([*args, "--set", "mcmc.unknown=1"]) == EXIT_USAGE


def test_missing_config_file(bundle_dir, tmp_path):
    code = main(["fit-factors", "--config", str(tmp_path / "none.json"), "--data-dir", str(bundle_dir)])
    assert code == EXIT_USAGE


def test_usage_errors_exit_with_one():
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == EXIT_USAGE
