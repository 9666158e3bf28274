"""
Two-Stage Estimators
Two-stage prediction and control-function fits of a nonlinear exposure effect
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from dataset import DataSet, Family
from linmod import DesignMatrix, IrlsFit, LsFit, ols, penalized_irls
from mr_errors import (
    DerivativeUnavailable,
    MethodMismatch,
    NotIdentifiable,
    RankDeficient,
)

logger = logging.getLogger(__name__)

INDEPENDENCE_TOL = 1e-8
FD_STEP = 1e-6


# ============================================================================
# Transform registry
# ============================================================================

@dataclass(frozen=True)
class Transform:
    """Named scalar function with an optional analytic derivative."""
    name: str
    func: Callable[[np.ndarray], np.ndarray]
    deriv: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x) -> np.ndarray:
        return self.func(np.asarray(x, dtype=float))

    @property
    def is_identity(self) -> bool:
        return self.name == "identity"

    def derivative(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.deriv is not None:
            d = self.deriv(x)
        else:
            step = FD_STEP * (1.0 + np.abs(x))
            d = (self.func(x + step) - self.func(x - step)) / (2.0 * step)
        if not np.isfinite(d).all():
            raise DerivativeUnavailable(f"derivative of {self.name} is not finite")
        return d


IDENTITY = Transform("identity", lambda x: x, lambda x: np.ones_like(x))

TRANSFORMS: Dict[str, Transform] = {
    t.name: t
    for t in (
        IDENTITY,
        Transform("square", np.square, lambda x: 2.0 * x),
        Transform("quad3", lambda x: (x / 3.0) ** 2, lambda x: 2.0 * x / 9.0),
        Transform("sin", np.sin, np.cos),
        Transform("cos", np.cos, lambda x: -np.sin(x)),
        Transform("exp3", lambda x: np.exp(x / 3.0), lambda x: np.exp(x / 3.0) / 3.0),
    )
}
ALIASES = {"linear": "identity", "x": "identity"}


def get_transform(name: str) -> Transform:
    """Look up a built-in transform; raises KeyError for unknown names."""
    key = ALIASES.get(name, name)
    if key not in TRANSFORMS:
        raise KeyError(f"unknown transform '{name}' (known: {', '.join(sorted(TRANSFORMS))})")
    return TRANSFORMS[key]


# ============================================================================
# Data Models
# ============================================================================

@dataclass(frozen=True)
class CovariateTerm:
    """g_j(C[:, column]); is_linear marks terms counted by the identifiability rule."""
    column: int
    transform: Transform = IDENTITY
    is_linear: bool = True


@dataclass(frozen=True)
class ModelSpec:
    """
    Declarative second-stage model.

    g_basis = None means every covariate column enters linearly.
    """
    f_basis: Tuple[Transform, ...] = (IDENTITY,)
    g_basis: Optional[Tuple[CovariateTerm, ...]] = None
    h_form: Transform = IDENTITY
    include_iv_stage2: bool = False
    outcome_family: Family = Family.GAUSSIAN

    def __post_init__(self):
        if len(self.f_basis) < 1:
            raise ValueError("f_basis needs at least one transform")
        object.__setattr__(self, "f_basis", tuple(self.f_basis))
        if self.g_basis is not None:
            object.__setattr__(self, "g_basis", tuple(self.g_basis))

    @property
    def k1(self) -> int:
        return len(self.f_basis)

    def covariate_terms(self, n_covariates: int) -> Tuple[CovariateTerm, ...]:
        if self.g_basis is None:
            return tuple(CovariateTerm(j) for j in range(n_covariates))
        for term in self.g_basis:
            if not 0 <= term.column < n_covariates:
                raise ValueError(f"g term refers to covariate {term.column}, data has {n_covariates}")
        return self.g_basis


class MethodTag(Enum):
    TWOSTAGE_PRED = "twostage_pred"
    CONTROL_FN = "control_fn"
    CONTROL_FN_PLEIO = "control_fn_pleio"
    CONTROL_FN_H = "control_fn_h"
    CONTROL_FN_BINARY = "control_fn_binary"


@dataclass(frozen=True)
class Stage1Fit:
    """Linear regression of X on [1, Z, C] with instrument-block diagnostics."""
    V: DesignMatrix
    beta: np.ndarray
    delta1_hat: np.ndarray
    var_delta1: float
    gram_inverse: np.ndarray
    first_stage_f: float
    first_stage_r2: float


@dataclass(frozen=True)
class FitResult:
    stage1: Stage1Fit
    W: DesignMatrix
    B_hat: np.ndarray
    theta_index: Tuple[int, ...]
    rho_hat: float
    var_e: float
    method_tag: MethodTag
    spec: ModelSpec
    y: np.ndarray
    residuals: np.ndarray
    gram_inverse: np.ndarray
    h_index: Optional[int] = None
    structural_residuals: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None
    q_diag: Optional[np.ndarray] = None
    cov: Optional[object] = field(default=None, repr=False)

    @property
    def coef_labels(self) -> Tuple[str, ...]:
        return self.W.column_labels

    @property
    def theta(self) -> np.ndarray:
        return self.B_hat[list(self.theta_index)]

    @property
    def cov_B(self) -> np.ndarray:
        return self.cov.cov

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_B), 0.0, None))


# ============================================================================
# Helpers
# ============================================================================

def _check_independent(columns, labels, what: str):
    """Raise RankDeficient unless [1, columns...] has full column rank."""
    block = np.column_stack([np.ones(len(columns[0]))] + list(columns))
    s = np.linalg.svd(block, compute_uv=False)
    if s[0] <= 0 or s[-1] <= INDEPENDENCE_TOL * s[0]:
        raise RankDeficient(
            f"{what} {labels} are not linearly independent with the constant on the observed data",
            module="estimators",
        )


def _f_columns(data: DataSet, spec: ModelSpec):
    cols = [t(data.x) for t in spec.f_basis]
    labels = [f"{t.name}({data.x_name})" for t in spec.f_basis]
    _check_independent(cols, labels, "exposure transforms")
    return labels, cols


def _g_columns(data: DataSet, spec: ModelSpec):
    labels, cols = [], []
    for term in spec.covariate_terms(data.n_covariates):
        name = data.c_names[term.column]
        labels.append(name if term.transform.is_identity else f"{term.transform.name}({name})")
        cols.append(term.transform(data.c[:, term.column]))
    return labels, cols


def _h_label(spec: ModelSpec) -> str:
    return "delta1" if spec.h_form.is_identity else f"{spec.h_form.name}(delta1)"


def _with_covariance(fit: FitResult) -> FitResult:
    from inference import covariance_for

    return replace(fit, cov=covariance_for(fit))


# ============================================================================
# Identification
# ============================================================================

def check_identifiability_2sp(spec: ModelSpec, n1: int, n2: int) -> Tuple[bool, str]:
    """
    Two-stage prediction is identifiable iff K1 + k <= n1 + n2, with k the
    number of linear covariate terms, n1 instruments and n2 covariates.
    """
    if n1 < 1:
        raise ValueError(f"need at least one instrument, got n1={n1}")
    if spec.g_basis is None:
        k = n2
    else:
        k = sum(1 for term in spec.g_basis if term.is_linear)
    ok = spec.k1 + k <= n1 + n2
    relation = "<=" if ok else ">"
    return ok, f"K1 + k = {spec.k1} + {k} {relation} n1 + n2 = {n1} + {n2}"


# ============================================================================
# Stage 1
# ============================================================================

def fit_stage1(data: DataSet) -> Stage1Fit:
    """Regress the exposure on [1, Z, C]; residuals are the control function."""
    ones = np.ones(data.n)
    V = DesignMatrix.from_columns(
        ("(intercept)",) + data.z_names + data.c_names,
        [ones] + list(data.z.T) + list(data.c.T),
    )
    fit = ols(V, data.x)

    restricted = DesignMatrix.from_columns(("(intercept)",) + data.c_names, [ones] + list(data.c.T))
    rss_r = ols(restricted, data.x).rss
    rss_u = fit.rss
    q = data.n_instruments
    dof = data.n - V.p
    gain = max(rss_r - rss_u, 0.0)
    first_stage_f = (gain / q) / (rss_u / dof) if rss_u > 0 and dof > 0 else float("inf")
    first_stage_r2 = gain / rss_r if rss_r > 0 else 0.0

    logger.info(f"stage 1: n={data.n}, first-stage F={first_stage_f:.4g}, partial R2={first_stage_r2:.4g}")
    return Stage1Fit(
        V=V,
        beta=fit.coef,
        delta1_hat=fit.residuals,
        var_delta1=fit.sigma2,
        gram_inverse=fit.gram_inverse,
        first_stage_f=first_stage_f,
        first_stage_r2=first_stage_r2,
    )


# ============================================================================
# Gaussian estimators
# ============================================================================

def fit_two_stage_prediction(data: DataSet, spec: ModelSpec) -> FitResult:
    """Substitute first-stage predictions of each f_j(X) into the outcome regression."""
    if spec.outcome_family is not Family.GAUSSIAN or data.family is not Family.GAUSSIAN:
        raise MethodMismatch("two-stage prediction needs a gaussian outcome", module="estimators")
    if spec.include_iv_stage2:
        raise MethodMismatch("two-stage prediction cannot include instruments in stage 2", module="estimators")

    ok, diagnostic = check_identifiability_2sp(spec, data.n_instruments, data.n_covariates)
    if not ok:
        raise NotIdentifiable(f"two-stage prediction not identifiable: {diagnostic}")

    stage1 = fit_stage1(data)
    f_labels, f_cols = _f_columns(data, spec)
    g_labels, g_cols = _g_columns(data, spec)
    f_hat = [col - ols(stage1.V, col).residuals for col in f_cols]

    labels = ["(intercept)"] + [f"hat({label})" for label in f_labels] + g_labels
    ones = np.ones(data.n)
    W = DesignMatrix.from_columns(labels, [ones] + f_hat + g_cols)
    fit: LsFit = ols(W, data.y)

    structural = np.column_stack([ones] + f_cols + g_cols)
    result = FitResult(
        stage1=stage1,
        W=W,
        B_hat=fit.coef,
        theta_index=tuple(range(1, 1 + spec.k1)),
        rho_hat=float("nan"),
        var_e=fit.sigma2,
        method_tag=MethodTag.TWOSTAGE_PRED,
        spec=spec,
        y=data.y,
        residuals=fit.residuals,
        gram_inverse=fit.gram_inverse,
        structural_residuals=data.y - structural @ fit.coef,
    )
    return _with_covariance(result)


def _control_function_design(data: DataSet, spec: ModelSpec, stage1: Stage1Fit):
    f_labels, f_cols = _f_columns(data, spec)
    g_labels, g_cols = _g_columns(data, spec)
    labels = ["(intercept)"] + f_labels
    cols = [np.ones(data.n)] + f_cols
    if spec.include_iv_stage2:
        labels += [f"{name}.direct" for name in data.z_names]
        cols += list(data.z.T)
    labels += g_labels + [_h_label(spec)]
    cols += g_cols + [spec.h_form(stage1.delta1_hat)]
    return DesignMatrix.from_columns(labels, cols)


def fit_control_function(data: DataSet, spec: ModelSpec) -> FitResult:
    """
    Regress Y on [1, f(X), (Z), g(C), h(delta1_hat)].

    A collinear design (e.g. f(X) = X with instruments in stage 2 and linear
    covariates) surfaces as RankDeficient.
    """
    if spec.outcome_family is not Family.GAUSSIAN or data.family is not Family.GAUSSIAN:
        raise MethodMismatch("use fit_control_function_binary for binomial outcomes", module="estimators")

    stage1 = fit_stage1(data)
    W = _control_function_design(data, spec, stage1)
    fit = ols(W, data.y)

    if not spec.h_form.is_identity:
        tag = MethodTag.CONTROL_FN_H
    elif spec.include_iv_stage2:
        tag = MethodTag.CONTROL_FN_PLEIO
    else:
        tag = MethodTag.CONTROL_FN

    h_index = W.p - 1
    logger.debug(f"{tag.value}: rho_hat={fit.coef[h_index]:.6g}, var_e={fit.sigma2:.6g}")
    result = FitResult(
        stage1=stage1,
        W=W,
        B_hat=fit.coef,
        theta_index=tuple(range(1, 1 + spec.k1)),
        rho_hat=float(fit.coef[h_index]),
        var_e=fit.sigma2,
        method_tag=tag,
        spec=spec,
        y=data.y,
        residuals=fit.residuals,
        gram_inverse=fit.gram_inverse,
        h_index=h_index,
    )
    return _with_covariance(result)


def fit_linear_mr(data: DataSet, spec: ModelSpec) -> FitResult:
    """Linear-MR baseline: the control-function fit with f(X) = X."""
    return fit_control_function(data, replace(spec, f_basis=(IDENTITY,)))


# ============================================================================
# Binary outcome
# ============================================================================

def fit_control_function_binary(data: DataSet, spec: ModelSpec) -> FitResult:
    """Logistic second stage on [1, f(X), (Z), g(C), h(delta1_hat)] without penalty."""
    if data.family is not Family.BINOMIAL:
        raise MethodMismatch("binary control function needs a binomial outcome", module="estimators")

    stage1 = fit_stage1(data)
    W = _control_function_design(data, spec, stage1)
    fit: IrlsFit = penalized_irls(W, data.y)

    h_index = W.p - 1
    logger.debug(f"binary control function converged in {fit.iterations} iterations")
    result = FitResult(
        stage1=stage1,
        W=W,
        B_hat=fit.coef,
        theta_index=tuple(range(1, 1 + spec.k1)),
        rho_hat=float(fit.coef[h_index]),
        var_e=0.0,
        method_tag=MethodTag.CONTROL_FN_BINARY,
        spec=replace(spec, outcome_family=Family.BINOMIAL),
        y=data.y,
        residuals=data.y - fit.mu,
        gram_inverse=fit.gram_inverse,
        h_index=h_index,
        mu=fit.mu,
        q_diag=fit.q_diag,
    )
    return _with_covariance(result)


ESTIMATORS: Dict[str, Callable[[DataSet, ModelSpec], FitResult]] = {
    "twostage_pred": fit_two_stage_prediction,
    "control_fn": fit_control_function,
    "linear_mr": fit_linear_mr,
    "control_fn_binary": fit_control_function_binary,
}
