import numpy as np
import pytest

from dataset import Family
from estimators import ModelSpec, fit_control_function
from mr_config import DataSource
from mr_errors import EmptyAfterFiltering, MissingColumn, NlmrWarning, NonNumericCell, exit_code_for
from mr_io import RunReport, coefficient_frame, load_csv, write_dataset_csv, write_table

SOURCE = DataSource(path="d.csv", instruments=("z",), covariates=("c",), exposure="x", outcome="y")

FIVE_ROWS = """z,c,x,y,unused
0.1,1.0,2.0,3.0,a
-0.4,0.5,1.5,2.5,b
1.2,-1.0,0.5,1.0,c
0.0,0.0,1.0,2.0,d
2.5,0.3,3.5,5.5,e
"""


def _write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_five_rows(tmp_path):
    data = load_csv(_write(tmp_path, FIVE_ROWS), SOURCE)
    assert data.n == 5
    assert data.z.shape == (5, 1)
    assert data.c.shape == (5, 1)
    assert data.x[4] == 3.5
    assert data.z_names == ("z",)
    assert data.x_name == "x"


def test_missing_rows_are_dropped_with_one_warning(tmp_path):
    text = FIVE_ROWS.replace("1.2,-1.0,0.5,1.0", "1.2,,0.5,1.0").replace("0.0,0.0,1.0,", "0.0,0.0,,")
    with pytest.warns(NlmrWarning, match="dropped 2 row") as record:
        data = load_csv(_write(tmp_path, text), SOURCE)
    assert len([w for w in record if issubclass(w.category, NlmrWarning)]) == 1
    assert data.n == 3


def test_missing_column(tmp_path):
    with pytest.raises(MissingColumn, match="'w'|w"):
        load_csv(_write(tmp_path, FIVE_ROWS), DataSource("d.csv", ("w",), "x", "y"))


def test_non_numeric_cell_names_row_and_column(tmp_path):
    text = FIVE_ROWS.replace("-0.4,0.5,1.5,2.5", "-0.4,0.5,abc,2.5")
    with pytest.raises(NonNumericCell) as excinfo:
        load_csv(_write(tmp_path, text), SOURCE)
    assert excinfo.value.row == 2
    assert excinfo.value.column == "x"
    assert exit_code_for(excinfo.value) == 3


def test_binomial_outcome_must_be_zero_one(tmp_path):
    text = "z,x,y\n0.1,1.0,0\n0.2,2.0,1\n0.3,3.0,2\n"
    source = DataSource("d.csv", ("z",), "x", "y", family=Family.BINOMIAL)
    with pytest.raises(NonNumericCell) as excinfo:
        load_csv(_write(tmp_path, text), source)
    assert excinfo.value.row == 3
    assert excinfo.value.column == "y"


def test_empty_after_filtering(tmp_path):
    text = "z,x,y\n,1.0,2.0\n0.5,,1.0\n"
    with pytest.warns(NlmrWarning):
        with pytest.raises(EmptyAfterFiltering):
            load_csv(_write(tmp_path, text), DataSource("d.csv", ("z",), "x", "y"))


def test_csv_round_trip_reproduces_the_fit(tmp_path, linear_data):
    path = write_dataset_csv(linear_data, tmp_path / "data.csv")
    source = DataSource(str(path), linear_data.z_names, linear_data.x_name, linear_data.y_name, linear_data.c_names)
    reloaded = load_csv(path, source)
    assert np.array_equal(reloaded.x, linear_data.x)
    assert np.array_equal(reloaded.y, linear_data.y)
    a = fit_control_function(linear_data, ModelSpec())
    b = fit_control_function(reloaded, ModelSpec())
    assert np.array_equal(a.B_hat, b.B_hat)
    assert np.array_equal(a.se, b.se)


def test_write_table_creates_directories(tmp_path):
    path = write_table(coefficient_frame(["a", "b"], [1.0, 2.0], [0.1, 0.2]), tmp_path / "out" / "coef.csv")
    assert path.read_text().splitlines()[0] == "term,estimate,se"


def test_report_json_round_trip(tmp_path):
    report = RunReport(command="fit", version="0.1.0", seed=3, config={"method": {"id": "spmr"}})
    report.coefficients = [{"term": "x", "estimate": np.float64(1.5), "se": 0.1}]
    report.tests["f_test"] = {"statistic": 2.0, "df_spec": {"f": (1, 10)}}
    report.diagnostics["family"] = Family.GAUSSIAN
    report.diagnostics["lambdas"] = np.array([0.5, 2.0])
    report.add_warning("boundary")

    text = report.to_json()
    again = RunReport.from_json(text)
    assert again.to_json() == text
    assert again.diagnostics == {"family": "gaussian", "lambdas": [0.5, 2.0]}
    assert again.tests["f_test"]["df_spec"] == {"f": [1, 10]}
    assert again.warnings == ["boundary"]

    written = report.write(tmp_path / "nested" / "report.json")
    assert RunReport.from_json(written.read_text()).seed == 3


def test_report_writes_non_finite_values_as_null():
    report = RunReport(command="simulate", version="0.1.0", seed=1, config={})
    report.diagnostics["rho_hat"] = float("nan")
    report.summary = [{"coverage95": np.float64("nan"), "mc_sd": float("inf"), "rejection_rate": 0.05}]

    text = report.to_json()
    assert "NaN" not in text and "Infinity" not in text
    again = RunReport.from_json(text)
    assert again.diagnostics["rho_hat"] is None
    assert again.summary == [{"coverage95": None, "mc_sd": None, "rejection_rate": 0.05}]
