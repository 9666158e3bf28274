from dataclasses import replace

import numpy as np
import pytest

from dataset import DataSet, Family
from estimators import (
    ESTIMATORS,
    IDENTITY,
    CovariateTerm,
    MethodTag,
    ModelSpec,
    Transform,
    check_identifiability_2sp,
    fit_control_function,
    fit_control_function_binary,
    fit_linear_mr,
    fit_stage1,
    fit_two_stage_prediction,
    get_transform,
)
from inference import CovMethod
from mr_errors import DerivativeUnavailable, MethodMismatch, NotIdentifiable, RankDeficient
from simkit import Scenario, gen_dataset


def _orthogonal_delta(rng, z, c):
    """A stage-1 error that is exactly orthogonal to [1, Z, C]."""
    raw = rng.standard_normal(z.size)
    V = np.column_stack([np.ones(z.size), z, c])
    return raw - V @ np.linalg.lstsq(V, raw, rcond=None)[0]


# ============================================================================
# Transforms and specs
# ============================================================================

def test_transform_registry():
    assert get_transform("linear") is IDENTITY
    assert get_transform("x").is_identity
    assert get_transform("quad3")(np.array([3.0])) == pytest.approx([1.0])
    with pytest.raises(KeyError):
        get_transform("cubic")


def test_numeric_derivative_without_analytic_form():
    cube = Transform("cube", lambda x: x**3)
    assert cube.derivative(np.array([0.0, 2.0])) == pytest.approx([0.0, 12.0], abs=1e-5)


def test_derivative_must_be_finite():
    broken = Transform("log", np.log, lambda x: 1.0 / x)
    with pytest.raises(DerivativeUnavailable):
        broken.derivative(np.array([0.0]))


def test_identifiability_rule():
    one = ModelSpec()
    two = ModelSpec(f_basis=(IDENTITY, get_transform("square")))
    assert check_identifiability_2sp(one, 1, 1)[0]
    assert check_identifiability_2sp(one, 1, 0)[0]
    ok, diagnostic = check_identifiability_2sp(two, 1, 1)
    assert not ok
    assert "K1 + k = 2 + 1" in diagnostic
    # a nonlinear covariate term does not use up an instrument
    nonlinear_c = replace(two, g_basis=(CovariateTerm(0, get_transform("square"), is_linear=False),))
    assert check_identifiability_2sp(nonlinear_c, 1, 1)[0]
    assert check_identifiability_2sp(two, 2, 1)[0]


def test_two_stage_prediction_rejects_unidentified_model(linear_data):
    spec = ModelSpec(f_basis=(IDENTITY, get_transform("square")))
    with pytest.raises(NotIdentifiable):
        fit_two_stage_prediction(linear_data, spec)


def test_two_stage_prediction_rejects_direct_effects(linear_data):
    with pytest.raises(MethodMismatch):
        fit_two_stage_prediction(linear_data, ModelSpec(include_iv_stage2=True))


# ============================================================================
# Stage 1
# ============================================================================

def test_stage1_diagnostics(linear_data):
    stage1 = fit_stage1(linear_data)
    assert stage1.V.column_labels == ("(intercept)", "z1", "c1")
    assert stage1.beta[1] == pytest.approx(0.8, abs=0.1)
    assert abs(stage1.delta1_hat.mean()) < 1e-10
    assert stage1.var_delta1 == pytest.approx(2.0, rel=0.1)
    # F for one instrument equals the squared t statistic
    t = stage1.beta[1] / np.sqrt(stage1.var_delta1 * stage1.gram_inverse[1, 1])
    assert stage1.first_stage_f == pytest.approx(t**2, rel=1e-8)
    assert 0.0 < stage1.first_stage_r2 < 1.0


# ============================================================================
# Gaussian fits
# ============================================================================

def test_noise_free_two_stage_prediction(rng):
    n = 200
    z, c = rng.standard_normal((2, n))
    x = 0.5 + z + c + _orthogonal_delta(rng, z, c)
    y = 1.0 + x + c
    fit = fit_two_stage_prediction(DataSet(z=z, c=c, x=x, y=y), ModelSpec())
    assert fit.theta == pytest.approx([1.0], abs=1e-10)
    assert np.allclose(fit.structural_residuals, 0.0, atol=1e-10)
    assert fit.se[1] < 1e-8
    assert fit.cov.method is CovMethod.THM3_2SP


def test_noise_free_control_function(rng):
    n = 200
    z, c = rng.standard_normal((2, n))
    delta1 = _orthogonal_delta(rng, z, c)
    x = 0.5 + z + c + delta1
    y = 1.0 + get_transform("quad3")(x) + c + 0.7 * delta1
    fit = fit_control_function(DataSet(z=z, c=c, x=x, y=y), ModelSpec(f_basis=(get_transform("quad3"),)))
    assert fit.theta == pytest.approx([1.0], abs=1e-10)
    assert fit.rho_hat == pytest.approx(0.7, abs=1e-10)
    assert fit.var_e < 1e-20
    assert fit.coef_labels == ("(intercept)", "quad3(x)", "c1", "delta1")


def test_two_stage_prediction_equals_control_function_for_linear_f(linear_data):
    twostage = fit_two_stage_prediction(linear_data, ModelSpec())
    control = fit_control_function(linear_data, ModelSpec())
    assert twostage.theta == pytest.approx(control.theta, rel=1e-8)
    assert control.theta == pytest.approx([1.0], abs=0.15)
    assert control.rho_hat == pytest.approx(1.0, abs=0.15)


def test_stage2_residuals_orthogonal_to_design(linear_data):
    fit = fit_control_function(linear_data, ModelSpec())
    score = fit.W.values.T @ fit.residuals
    assert np.max(np.abs(score)) < 1e-8 * np.linalg.norm(linear_data.y) * np.sqrt(linear_data.n)
    assert fit.method_tag is MethodTag.CONTROL_FN
    assert fit.cov.method is CovMethod.THM4_CF
    assert (fit.se > 0).all()


def test_linear_mr_ignores_configured_basis(quad_data):
    fit = fit_linear_mr(quad_data, ModelSpec(f_basis=(get_transform("quad3"),)))
    assert fit.coef_labels[1] == "identity(x)"


def test_pleiotropy_with_linear_f_is_rank_deficient(linear_data):
    with pytest.raises(RankDeficient):
        fit_control_function(linear_data, ModelSpec(include_iv_stage2=True))


def test_pleiotropy_with_nonlinear_f():
    sc = Scenario(causal_f="quad3", n=3000, pve=0.25, pleiotropy="uncorrelated", base_seed=5)
    data = gen_dataset(sc, 0)
    fit = fit_control_function(data, ModelSpec(f_basis=(get_transform("quad3"),), include_iv_stage2=True))
    assert fit.method_tag is MethodTag.CONTROL_FN_PLEIO
    assert "z1.direct" in fit.coef_labels
    direct = fit.W.index_of("z1.direct")
    assert abs(fit.B_hat[direct] - 1.0) < 4 * fit.se[direct]
    assert abs(fit.theta[0] - 1.0) < 4 * fit.se[1]


def test_nonlinear_h_uses_m_estimation(quad_data):
    spec = ModelSpec(f_basis=(get_transform("quad3"),), h_form=get_transform("sin"))
    fit = fit_control_function(quad_data, spec)
    assert fit.method_tag is MethodTag.CONTROL_FN_H
    assert fit.cov.method is CovMethod.THM9_MEST
    assert fit.coef_labels[-1] == "sin(delta1)"
    assert np.isfinite(fit.se).all()


def test_gaussian_estimators_reject_binary_data(binary_data):
    with pytest.raises(MethodMismatch):
        fit_control_function(binary_data, ModelSpec())
    with pytest.raises(MethodMismatch):
        fit_two_stage_prediction(binary_data, ModelSpec())


# ============================================================================
# Binary outcome
# ============================================================================

def test_binary_control_function(binary_data):
    spec = ModelSpec(f_basis=(get_transform("quad3"),), outcome_family=Family.BINOMIAL)
    fit = fit_control_function_binary(binary_data, spec)
    assert fit.method_tag is MethodTag.CONTROL_FN_BINARY
    assert fit.cov.method is CovMethod.THM11_BINARY
    assert np.allclose(fit.q_diag, fit.mu * (1.0 - fit.mu))
    assert fit.se[1] > 0
    assert abs(fit.theta[0] - 1.0) < 4 * fit.se[1]


def test_binary_estimator_rejects_gaussian_data(linear_data):
    with pytest.raises(MethodMismatch):
        fit_control_function_binary(linear_data, ModelSpec())


def test_estimator_registry():
    assert set(ESTIMATORS) == {"twostage_pred", "control_fn", "linear_mr", "control_fn_binary"}
