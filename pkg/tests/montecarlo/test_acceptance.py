"""
Monte Carlo acceptance checks. Each cell runs hundreds of replicates, so the
module is marked slow and skipped by default; run with `pytest -m slow`.
NLMR_WORKERS sets the process pool size.
"""

import numpy as np
import pytest

from dataset import Family
from estimators import ModelSpec, fit_control_function, fit_two_stage_prediction
from mr_config import RuntimeSettings
from simkit import MethodConfig, Scenario, gen_dataset, run_mc, run_replicate

pytestmark = pytest.mark.slow

WORKERS = RuntimeSettings.from_env().workers
SEED = 20240101


def _run(method_id: str, replicates: int, **scenario):
    method_kw = {k: scenario.pop(k) for k in ("include_iv_stage2", "h_form_fit") if k in scenario}
    method = MethodConfig(
        method_id,
        include_iv_stage2=method_kw.get("include_iv_stage2", False),
        h_form=method_kw.get("h_form_fit", "identity"),
    )
    sc = Scenario(base_seed=SEED, replicates=replicates, **scenario)
    return run_mc(sc, method, workers=WORKERS)


# ============================================================================
# Parametric estimators
# ============================================================================

def test_two_stage_prediction_equals_control_function_for_linear_f():
    for rep in range(50):
        data = gen_dataset(Scenario(causal_f="linear", n=500, pve=0.10, base_seed=SEED), rep)
        a = fit_two_stage_prediction(data, ModelSpec()).theta[0]
        b = fit_control_function(data, ModelSpec()).theta[0]
        assert abs(a - b) < 1e-10


@pytest.mark.parametrize("causal_f", ["quad3", "sin", "exp3"])
def test_control_function_is_more_efficient(causal_f):
    cf = _run("control_fn", 500, causal_f=causal_f, n=5000, pve=0.10)
    twostage = _run("twostage_pred", 500, causal_f=causal_f, n=5000, pve=0.10)
    assert cf.mc_sd <= twostage.mc_sd


@pytest.mark.parametrize("causal_f", ["quad3", "sin"])
@pytest.mark.parametrize("pve", [0.01, 0.10])
@pytest.mark.parametrize("n", [1000, 5000])
def test_control_function_accuracy_and_coverage(causal_f, pve, n):
    summary = _run("control_fn", 1000, causal_f=causal_f, n=n, pve=pve)
    assert 0.95 <= summary.mean_estimate <= 1.05
    assert abs(summary.coverage95 - 0.95) <= 0.015


@pytest.mark.parametrize("causal_f", ["quad3", "sin"])
@pytest.mark.parametrize("pve", [0.10])
@pytest.mark.parametrize("n", [5000])
def test_two_stage_prediction_coverage(causal_f, pve, n):
    summary = _run("twostage_pred", 1000, causal_f=causal_f, n=n, pve=pve)
    assert abs(summary.coverage95 - 0.95) <= 0.02


@pytest.mark.xfail(reason="two-stage prediction is known to be inaccurate for sin at n=1000, PVE=25%", strict=False)
def test_two_stage_prediction_sine_anomaly():
    summary = _run("twostage_pred", 1000, causal_f="sin", n=1000, pve=0.25)
    assert 0.95 <= summary.mean_estimate <= 1.05


@pytest.mark.parametrize("pleiotropy", ["uncorrelated", "correlated", "both"])
def test_pleiotropy_robustness(pleiotropy):
    summary = _run(
        "control_fn", 500, causal_f="quad3", n=5000, pve=0.10, pleiotropy=pleiotropy, include_iv_stage2=True
    )
    assert summary.failures == 0
    assert 0.95 <= summary.mean_estimate <= 1.05
    assert abs(summary.coverage95 - 0.95) <= 0.02


def test_nonlinear_confounding_needs_the_h_correction():
    common = dict(causal_f="sin", n=5000, pve=0.10, h_form="quad3")
    corrected = _run("control_fn", 500, h_form_fit="quad3", **common)
    naive = _run("control_fn", 500, **common)
    assert 0.95 <= corrected.mean_estimate <= 1.05
    assert abs(naive.mean_estimate - 1.0) > 0.10


def test_null_f_test_size():
    sc = Scenario(causal_f="null", n=5000, pve=0.10, base_seed=SEED, replicates=1000)
    method = MethodConfig("control_fn", f_basis=("identity", "square"))
    summary = run_mc(sc, method, workers=WORKERS)
    assert 0.035 <= summary.rejection_rate <= 0.065


@pytest.mark.parametrize(
    "method_id, scenario",
    [
        ("twostage_pred", {}),
        ("control_fn", {}),
        ("control_fn", {"pleiotropy": "both", "include_iv_stage2": True}),
        ("control_fn", {"h_form": "quad3", "h_form_fit": "quad3", "causal_f": "sin"}),
        ("control_fn_binary", {"outcome_family": Family.BINOMIAL, "causal_f": "sin"}),
    ],
)
def test_standard_errors_match_monte_carlo_spread(method_id, scenario):
    settings = {"causal_f": "quad3", "n": 10000, "pve": 0.10, **scenario}
    summary = _run(method_id, 500, **settings)
    assert 0.9 <= summary.mean_model_se / summary.mc_sd <= 1.1


def test_binary_coverage():
    summary = _run("control_fn_binary", 500, causal_f="sin", n=10000, pve=0.10, outcome_family=Family.BINOMIAL)
    assert abs(summary.coverage95 - 0.95) <= 0.02


# ============================================================================
# Semiparametric estimator
# ============================================================================

@pytest.mark.parametrize("causal_f", ["quad3", "sin", "exp3"])
def test_spmr_recovers_the_shape(causal_f):
    summary = _run("spmr", 100, causal_f=causal_f, n=1000, pve=0.01)
    assert summary.median_curve_corr > 0.9


@pytest.mark.parametrize("pve", [0.01, 0.10])
@pytest.mark.parametrize("n", [1000, 5000])
def test_spmr_type_one_error(pve, n):
    summary = _run("spmr", 1000, causal_f="null", n=n, pve=pve)
    assert 0.04 <= summary.rejection_rate <= 0.08


def test_spmr_power():
    summary = _run("spmr", 500, causal_f="quad3", n=5000, pve=0.05)
    assert summary.rejection_rate >= 0.95


def test_spmr_beats_linear_mr_for_sine():
    sc = Scenario(causal_f="sin", n=1000, pve=0.01, base_seed=SEED, replicates=200)
    spmr_rejections = linear_rejections = 0
    for rep in range(sc.replicates):
        spmr_rejections += run_replicate(sc, MethodConfig("spmr"), rep).reject
        linear_rejections += run_replicate(sc, MethodConfig("linear_mr"), rep).reject
    assert spmr_rejections >= linear_rejections


def test_binary_spmr_type_one_error():
    summary = _run("spmr", 500, causal_f="null", n=5000, pve=0.10, outcome_family=Family.BINOMIAL)
    assert 0.03 <= summary.rejection_rate <= 0.08
    assert np.isfinite(summary.mean_first_stage_r2)
