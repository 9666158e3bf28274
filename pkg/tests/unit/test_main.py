import json
from unittest.mock import Mock, patch

import pandas as pd
import pytest

from main import build_parser, main, run
from mr_config import RuntimeSettings
from mr_errors import SingularSystem
from mr_io import write_dataset_csv
from simkit import Scenario, gen_dataset

SETTINGS = RuntimeSettings()

FIT_TOML = """
schema_version = 1
seed = 11

[method]
id = "{method}"

[data]
path = "data.csv"
instruments = ["z1"]
covariates = ["c1"]
exposure = "x"
outcome = "y"

[model]
f_basis = ["quad3"]

[output]
dir = "out"
"""

SIMULATE_TOML = """
schema_version = 1
seed = 5

[method]
id = "control_fn"

[simulate]
causal_f = ["quad3", "null"]
pve = [0.25]
n = [300]
replicates = 4
export_data = true

[output]
dir = "sim"
"""


@pytest.fixture
def fit_config(tmp_path, write_toml):
    write_dataset_csv(gen_dataset(Scenario(causal_f="quad3", n=1000, pve=0.25, base_seed=2), 0), tmp_path / "data.csv")

    def _config(method: str = "control_fn"):
        return write_toml(FIT_TOML.format(method=method))

    return _config


def _read_report(path):
    return json.loads(path.read_text())


def test_fit_writes_report(fit_config, tmp_path):
    report = run(fit_config(), "fit", settings=SETTINGS)
    written = _read_report(tmp_path / "out" / "report.json")
    assert written["command"] == "fit"
    assert written["seed"] == 11
    assert [row["term"] for row in report.coefficients] == ["(intercept)", "quad3(x)", "c1", "delta1"]
    assert written["tests"]["f_test"]["p_value"] < 0.05
    assert written["diagnostics"]["covariance"] == "thm4_cf"
    assert written["diagnostics"]["first_stage_f"] > 10


def test_fit_is_deterministic_apart_from_timing(fit_config):
    first = run(fit_config(), "fit", settings=SETTINGS).to_dict()
    second = run(fit_config(), "fit", settings=SETTINGS).to_dict()
    first.pop("timing")
    second.pop("timing")
    assert first == second


def test_seed_override_is_reported(fit_config):
    assert run(fit_config(), "fit", seed=99, settings=SETTINGS).seed == 99


def test_spmr_fit_and_curve(fit_config, tmp_path):
    report = run(fit_config("spmr"), "fit", settings=SETTINGS)
    assert "smooth_test" in report.tests
    assert 1.0 <= report.diagnostics["edf_x"] <= 9.0

    report = run(fit_config("spmr"), "curve", grid="-2:4:7", settings=SETTINGS)
    curve = pd.read_csv(tmp_path / "out" / "curve.csv")
    assert list(curve.columns) == ["x", "f_hat", "se", "lo95", "hi95"]
    assert len(curve) == 7
    assert report.artifacts["curve"] == "curve.csv"


def test_simulate_writes_summary_and_datasets(write_toml, tmp_path):
    report = run(write_toml(SIMULATE_TOML), "simulate", workers=1, settings=SETTINGS)
    summary = pd.read_csv(tmp_path / "sim" / "summary.csv")
    assert list(summary["causal_f"]) == ["quad3", "null"]
    assert (summary["replicates_ok"] == 4).all()
    assert (tmp_path / "sim" / "data_000.csv").exists()
    assert (tmp_path / "sim" / "data_001.csv").exists()
    assert len(report.summary) == 2


def test_output_dir_from_environment(tmp_path, write_toml):
    write_dataset_csv(gen_dataset(Scenario(n=500, base_seed=2), 0), tmp_path / "data.csv")
    config = write_toml(FIT_TOML.format(method="control_fn").replace('[output]\ndir = "out"\n', ""))
    run(config, "fit", settings=RuntimeSettings(output_dir="env-out"))
    assert (tmp_path / "env-out" / "report.json").exists()


def test_warnings_are_recorded_once(fit_config):
    report = run(fit_config("spmr"), "curve", grid="-50:50:5", settings=SETTINGS)
    clamped = [w for w in report.warnings if "clamped" in w]
    assert len(clamped) == 1


# ============================================================================
# CLI
# ============================================================================

def test_parser_requires_config():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["fit"])


def test_main_success(fit_config):
    assert main(["fit", "--config", str(fit_config())]) == 0


def test_main_config_error(write_toml):
    assert main(["fit", "--config", str(write_toml("schema_version = 3\n"))]) == 2


def test_main_data_error(fit_config, tmp_path):
    (tmp_path / "data.csv").write_text("z1,c1,x\n1,2,3\n")
    assert main(["fit", "--config", str(fit_config())]) == 3


def test_main_numerical_error(fit_config):
    failing = Mock(side_effect=SingularSystem("forced"))
    with patch.dict("main.ESTIMATORS", {"control_fn": failing}):
        assert main(["fit", "--config", str(fit_config())]) == 4


def test_main_unexpected_error(fit_config):
    with patch("main.run", side_effect=RuntimeError("boom")):
        assert main(["fit", "--config", str(fit_config())]) == 1


def test_main_bad_environment(fit_config):
    with patch.dict("os.environ", {"NLMR_WORKERS": "zero"}):
        assert main(["fit", "--config", str(fit_config())]) == 2
