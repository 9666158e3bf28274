"""
Inference
Sandwich and Bayesian covariances, the parametric F-test, the smooth-term test
and tail probabilities of weighted chi-square sums
"""

import logging
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, stats

from estimators import FitResult, MethodTag
from linmod import DesignMatrix, solve_spd
from mr_errors import (
    MethodMismatch,
    NlmrWarning,
    QuadratureFailure,
    RankTooLow,
    SingularThetaCov,
)

logger = logging.getLogger(__name__)

FRACTIONAL_CUTOFF = 0.05
EIGEN_TOL = 1e-10
TAIL_ACCURACY = 1e-6


class CovMethod(Enum):
    THM3_2SP = "thm3_2sp"
    THM4_CF = "thm4_cf"
    THM9_MEST = "thm9_mest"
    THM11_BINARY = "thm11_binary"
    BAYES_VB = "bayes_vb"


@dataclass(frozen=True)
class CovEstimate:
    cov: np.ndarray
    method: CovMethod
    d_matrix_trace: float = float("nan")

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    statistic: float
    p_value: float
    df_spec: Dict[str, Tuple[float, ...]]
    rank_r: Optional[float] = None
    degraded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "statistic", max(float(self.statistic), 0.0))
        object.__setattr__(self, "p_value", min(max(float(self.p_value), 0.0), 1.0))

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "df_spec": {k: list(v) for k, v in self.df_spec.items()},
            "rank_r": self.rank_r,
            "degraded": self.degraded,
        }


@dataclass(frozen=True)
class TailProbability:
    p: float
    degraded: bool = False
    method: str = "imhof"


# ============================================================================
# Meat matrices
# ============================================================================

def cf_meat(
    W: DesignMatrix,
    V: DesignMatrix,
    vtv_inverse: np.ndarray,
    var_e: float,
    rho: float,
    var_delta1: float,
) -> Tuple[np.ndarray, float]:
    """
    W'DW for D = var_e I + rho^2 var_delta1 V (V'V)^-1 V', without forming D.

    Returns the meat and trace(D).
    """
    Wm = W.values
    wtv = Wm.T @ V.values
    meat = var_e * (Wm.T @ Wm) + rho ** 2 * var_delta1 * (wtv @ vtv_inverse @ wtv.T)
    d_trace = W.n * var_e + rho ** 2 * var_delta1 * V.p
    return meat, d_trace


def stacked_meat(
    W: DesignMatrix,
    V: DesignMatrix,
    vtv_inverse: np.ndarray,
    delta1: np.ndarray,
    residual: np.ndarray,
    slope: np.ndarray,
    dW_ddelta: np.ndarray,
    coef: np.ndarray,
) -> np.ndarray:
    """
    Sum of A_i A_i' for the stacked two-step M-estimator.

    A_i = w_i r_i + C_hat (V'V/n)^-1 v_i delta1_i, where only the columns of W
    that depend on delta1 (through dW_ddelta) react to the stage-1 estimate and
    `slope` is the derivative of the mean function (1 gaussian, mu(1-mu) binary).
    """
    Wm, Vm = W.values, V.values
    # d psi_i / d beta = g_i v_i'
    g = -dW_ddelta * residual[:, None] + Wm * (slope * (dW_ddelta @ coef))[:, None]
    correction = (delta1[:, None] * Vm) @ vtv_inverse @ (Vm.T @ g)
    A = Wm * residual[:, None] + correction
    return A.T @ A


def _sandwich(bread_inverse: np.ndarray, meat: np.ndarray) -> np.ndarray:
    return bread_inverse @ meat @ bread_inverse


# ============================================================================
# Covariances of parametric fits
# ============================================================================

def cov_2sp(fit: FitResult) -> CovEstimate:
    """Plug-in sandwich with residuals taken against the structural regressors."""
    if fit.method_tag is not MethodTag.TWOSTAGE_PRED:
        raise MethodMismatch(f"cov_2sp needs a two-stage prediction fit, got {fit.method_tag.value}")
    W = fit.W.values
    r = fit.structural_residuals
    meat = W.T @ (W * (r ** 2)[:, None])
    return CovEstimate(_sandwich(fit.gram_inverse, meat), CovMethod.THM3_2SP, float(r @ r))


def cov_cf(fit: FitResult) -> CovEstimate:
    if fit.method_tag not in (MethodTag.CONTROL_FN, MethodTag.CONTROL_FN_PLEIO) or not fit.spec.h_form.is_identity:
        raise MethodMismatch(f"cov_cf needs a linear control-function fit, got {fit.method_tag.value}")
    s1 = fit.stage1
    meat, d_trace = cf_meat(fit.W, s1.V, s1.gram_inverse, fit.var_e, fit.rho_hat, s1.var_delta1)
    return CovEstimate(_sandwich(fit.gram_inverse, meat), CovMethod.THM4_CF, d_trace)


def cov_mestim(fit: FitResult) -> CovEstimate:
    """Two-step M-estimation sandwich for nonlinear h and for binary outcomes."""
    if fit.method_tag not in (MethodTag.CONTROL_FN_H, MethodTag.CONTROL_FN_BINARY):
        raise MethodMismatch(f"cov_mestim needs a nonlinear-h or binary fit, got {fit.method_tag.value}")
    s1 = fit.stage1
    dW = np.zeros_like(fit.W.values)
    dW[:, fit.h_index] = fit.spec.h_form.derivative(s1.delta1_hat)

    if fit.method_tag is MethodTag.CONTROL_FN_BINARY:
        slope, method = fit.q_diag, CovMethod.THM11_BINARY
    else:
        slope, method = np.ones(fit.W.n), CovMethod.THM9_MEST

    meat = stacked_meat(fit.W, s1.V, s1.gram_inverse, s1.delta1_hat, fit.residuals, slope, dW, fit.B_hat)
    return CovEstimate(_sandwich(fit.gram_inverse, meat), method, float(np.trace(meat)))


def covariance_for(fit: FitResult) -> CovEstimate:
    """Pick the covariance estimator matching how the fit was produced."""
    if fit.method_tag is MethodTag.TWOSTAGE_PRED:
        return cov_2sp(fit)
    if fit.method_tag in (MethodTag.CONTROL_FN, MethodTag.CONTROL_FN_PLEIO):
        return cov_cf(fit)
    return cov_mestim(fit)


# ============================================================================
# Bayesian covariance
# ============================================================================

def bayes_cov(
    W: DesignMatrix,
    meat: np.ndarray,
    S_full: np.ndarray,
    lam: float,
    weights: Optional[np.ndarray] = None,
) -> CovEstimate:
    """
    V_B = (W'QW + lam S)^-1 meat (W'QW)^-1, symmetrized.

    Q is the identity unless binary working weights are given.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    Wm = W.values
    gram = Wm.T @ Wm if weights is None else Wm.T @ (Wm * np.asarray(weights)[:, None])
    zero = np.zeros(W.p)
    _, penalized_inverse = solve_spd(gram + lam * np.asarray(S_full, dtype=float), zero)
    _, gram_inverse = solve_spd(gram, zero)
    vb = penalized_inverse @ meat @ gram_inverse
    return CovEstimate(vb, CovMethod.BAYES_VB, float(np.trace(meat)))


# ============================================================================
# Tests
# ============================================================================

def f_test(fit, cov: CovEstimate) -> TestResult:
    """Wald-type F statistic for H0: theta = 0 against F(K1, n - p)."""
    index = list(fit.theta_index)
    theta = np.asarray(fit.B_hat)[index]
    v_theta = cov.cov[np.ix_(index, index)]
    k1 = len(index)

    eig = np.linalg.eigvalsh(v_theta)
    if eig[-1] <= 0 or eig[0] <= 1e-12 * eig[-1]:
        raise SingularThetaCov(f"theta covariance is singular (eigenvalues {eig[0]:.3g}..{eig[-1]:.3g})")

    statistic = float(theta @ np.linalg.solve(v_theta, theta)) / k1
    df2 = fit.W.n - fit.W.p
    p_value = float(stats.f.sf(statistic, k1, df2))
    return TestResult(statistic, p_value, {"f": (k1, df2)})


def mixture_weights(nu: float) -> Tuple[float, float]:
    """Eigenvalues of the coupling block [[1, rho], [rho, nu]], rho^2 = nu(1-nu)/2."""
    nu1 = (nu + 1.0 + math.sqrt(1.0 - nu ** 2)) / 2.0
    return nu1, nu + 1.0 - nu1


def smooth_test(f_hat, V_f, r: float) -> TestResult:
    """
    T_r = f' V_f^{r-} f with a rank-r pseudo-inverse of V_f.

    Fractional r couples the last two retained eigen-directions so that the
    null is chi2_{m-1} + nu1 chi2_1 + nu2 chi2_1 with m = floor(r).
    """
    if r < 1:
        raise ValueError(f"rank r must be >= 1, got {r}")
    f_hat = np.asarray(f_hat, dtype=float).ravel()
    V_f = np.asarray(V_f, dtype=float)
    V_f = 0.5 * (V_f + V_f.T)

    eigval, eigvec = np.linalg.eigh(V_f)
    order = np.argsort(eigval)[::-1]
    eigval, eigvec = eigval[order], eigvec[:, order]

    m = int(math.floor(r))
    nu = r - m
    fractional = nu >= FRACTIONAL_CUTOFF
    needed = m + 1 if fractional else m
    retained = int(np.sum(eigval > EIGEN_TOL * max(eigval[0], 0.0))) if eigval[0] > 0 else 0
    if retained < needed:
        raise RankTooLow(f"V_f has {retained} usable eigenvalues, rank {r:.3f} needs {needed}")

    u = eigvec[:, :needed].T @ f_hat
    if not fractional:
        statistic = float(np.sum(u ** 2 / eigval[:m]))
        return TestResult(statistic, float(stats.chi2.sf(statistic, m)), {"chi2": (m,)}, rank_r=r)

    scaled = u / np.sqrt(eigval[:needed])
    statistic = float(np.sum(scaled[: m - 1] ** 2))
    rho = math.sqrt(nu * (1.0 - nu) / 2.0)
    a, b = scaled[m - 1], scaled[m]
    statistic += float(a * a + 2.0 * rho * a * b + nu * b * b)

    nu1, nu2 = mixture_weights(nu)
    terms = [(nu1, 1.0), (nu2, 1.0)]
    if m > 1:
        terms.insert(0, (1.0, float(m - 1)))
    tail = weighted_chisq_tail(statistic, terms)
    return TestResult(
        statistic, tail.p, {"mixture": (m - 1, nu1, nu2)}, rank_r=r, degraded=tail.degraded
    )


# ============================================================================
# Weighted chi-square tails
# ============================================================================

def _satterthwaite(t: float, weights: np.ndarray, dfs: np.ndarray) -> float:
    mean = float(np.sum(weights * dfs))
    var = float(np.sum(2.0 * weights ** 2 * dfs))
    scale = var / (2.0 * mean)
    dof = 2.0 * mean ** 2 / var
    return float(stats.chi2.sf(t / scale, dof))


def _imhof(t: float, weights: np.ndarray, dfs: np.ndarray) -> Tuple[float, float]:
    """Characteristic-function inversion; returns (p, absolute error bound)."""
    half_t = 0.5 * t

    def phase(u):
        return 0.5 * np.sum(dfs * np.arctan(weights * u))

    def damping(u):
        return u * np.exp(0.25 * np.sum(dfs * np.log1p((weights * u) ** 2)))

    def integrand(u):
        if u == 0.0:
            return 0.5 * float(np.sum(dfs * weights)) - half_t
        return math.sin(phase(u) - half_t * u) / damping(u)

    # oscillation frequency of the tail is t/2; integrate a few periods directly
    split = max(1.0, 20.0 * math.pi / half_t)
    head, head_err = integrate.quad(integrand, 0.0, split, limit=1000, epsabs=1e-10, epsrel=1e-10)

    # sin(a - wu) = sin(a) cos(wu) - cos(a) sin(wu) with slowly varying a(u)
    tail_cos, err_cos = integrate.quad(
        lambda u: math.sin(phase(u)) / damping(u), split, np.inf, weight="cos", wvar=half_t, limlst=100
    )
    tail_sin, err_sin = integrate.quad(
        lambda u: math.cos(phase(u)) / damping(u), split, np.inf, weight="sin", wvar=half_t, limlst=100
    )
    value = head + tail_cos - tail_sin
    return 0.5 + value / math.pi, (head_err + err_cos + err_sin) / math.pi


def weighted_chisq_tail(t: float, terms: Sequence[Tuple[float, float]]) -> TailProbability:
    """
    P(sum_j w_j chi2_{df_j} > t).

    Falls back to Satterthwaite moment matching (flagged as degraded) when the
    quadrature cannot certify the target accuracy.
    """
    if not terms:
        raise ValueError("need at least one (weight, df) term")
    weights = np.array([float(w) for w, _ in terms])
    dfs = np.array([float(d) for _, d in terms])
    if np.any(weights <= 0) or np.any(dfs <= 0):
        raise ValueError(f"weights and degrees of freedom must be positive: {list(terms)}")
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if t == 0:
        return TailProbability(1.0)

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            p, err = _imhof(float(t), weights, dfs)
        if not np.isfinite(p) or err > TAIL_ACCURACY:
            raise QuadratureFailure(f"quadrature error bound {err:.3g} exceeds {TAIL_ACCURACY}")
    except (QuadratureFailure, integrate.IntegrationWarning) as e:
        message = f"weighted chi-square tail at t={t:.6g} fell back to Satterthwaite: {e}"
        logger.warning(message)
        warnings.warn(message, NlmrWarning, stacklevel=2)
        return TailProbability(_satterthwaite(float(t), weights, dfs), degraded=True, method="satterthwaite")

    return TailProbability(min(max(p, 0.0), 1.0))


def wsumchisq_sf(t: float, terms: Sequence[Tuple[float, float]]) -> float:
    return weighted_chisq_tail(t, terms).p
