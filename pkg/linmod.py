"""
Regression Numerics
Ordinary, penalized and iteratively reweighted penalized least squares
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.special import expit

from mr_errors import NonFinite, NotConverged, QuasiSeparation, RankDeficient, SingularSystem

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10
IRLS_MAX_ITER = 50
IRLS_TOL = 1e-8
MAX_HALVINGS = 10
OBJECTIVE_SLACK = 1e-10
SEPARATION_ETA = 30.0


# ============================================================================
# Data Models
# ============================================================================

@dataclass(frozen=True)
class DesignMatrix:
    """Regressor matrix with one label per column."""
    values: np.ndarray
    column_labels: Tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2:
            raise ValueError(f"design must be 2-d, got shape {values.shape}")
        labels = tuple(self.column_labels)
        n, p = values.shape
        if p < 1:
            raise ValueError("design needs at least one column")
        if n < p:
            raise RankDeficient(f"design has {n} rows but {p} columns")
        if len(labels) != p:
            raise ValueError(f"{len(labels)} labels for {p} columns")
        if len(set(labels)) != p:
            raise ValueError(f"column labels are not unique: {labels}")
        if not np.isfinite(values).all():
            raise NonFinite("design contains NaN or Inf")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def index_of(self, label: str) -> int:
        return self.column_labels.index(label)

    @classmethod
    def from_columns(cls, labels: Sequence[str], columns: Sequence[np.ndarray]) -> "DesignMatrix":
        return cls(np.column_stack([np.asarray(c, dtype=float) for c in columns]), tuple(labels))


@dataclass(frozen=True)
class LsFit:
    """Result of an (optionally penalized) least-squares solve."""
    coef: np.ndarray
    residuals: np.ndarray
    gram_inverse: np.ndarray
    sigma2: float
    lam: float
    edf: float

    @property
    def rss(self) -> float:
        return float(self.residuals @ self.residuals)


@dataclass(frozen=True)
class IrlsFit:
    """Penalized logistic fit; q_diag holds the working weights mu(1-mu)."""
    coef: np.ndarray
    mu: np.ndarray
    q_diag: np.ndarray
    converged: bool
    iterations: int
    gram_inverse: np.ndarray
    deviance: float
    edf: float
    lam: float
    objective_path: Tuple[float, ...] = ()


# ============================================================================
# Helpers
# ============================================================================

def _check_response(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != n:
        raise ValueError(f"response has {y.shape[0]} entries, design has {n} rows")
    if not np.isfinite(y).all():
        raise NonFinite("response contains NaN or Inf")
    return y


def _check_penalty(S, p: int) -> np.ndarray:
    if S is None:
        return np.zeros((p, p))
    S = np.asarray(S, dtype=float)
    if S.shape != (p, p):
        raise ValueError(f"penalty is {S.shape}, expected {(p, p)}")
    scale = max(float(np.max(np.abs(S))), 1.0)
    if not np.allclose(S, S.T, atol=1e-10 * scale, rtol=0.0):
        raise ValueError("penalty matrix is not symmetric")
    return S


def _residual_variance(rss: float, n: int, edf: float) -> float:
    dof = n - edf
    if dof <= 0:
        return 0.0
    return rss / dof


def solve_spd(A: np.ndarray, rhs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Solve A x = rhs for symmetric positive definite A, returning x and A^-1."""
    eig = np.linalg.eigvalsh(A)
    if eig[-1] <= 0 or eig[0] <= 1e-14 * eig[-1]:
        raise SingularSystem(f"system matrix numerically singular (eigenvalues {eig[0]:.3g}..{eig[-1]:.3g})")
    try:
        factor = scipy.linalg.cho_factor(A)
    except scipy.linalg.LinAlgError as e:
        raise SingularSystem(f"Cholesky factorization failed: {e}") from e
    x = scipy.linalg.cho_solve(factor, rhs)
    A_inv = scipy.linalg.cho_solve(factor, np.eye(A.shape[0]))
    return x, 0.5 * (A_inv + A_inv.T)


# ============================================================================
# Least squares
# ============================================================================

def ols(design: DesignMatrix, y) -> LsFit:
    """Ordinary least squares via a thin QR factorization."""
    D = design.values
    y = _check_response(y, design.n)
    n, p = D.shape

    s = np.linalg.svd(D, compute_uv=False)
    if s[0] <= 0 or s[-1] <= RANK_TOL * s[0]:
        raise RankDeficient(
            f"design {design.column_labels} is rank deficient "
            f"(singular value ratio {s[-1] / s[0] if s[0] > 0 else 0.0:.3g})"
        )

    q, r = scipy.linalg.qr(D, mode="economic")
    coef = scipy.linalg.solve_triangular(r, q.T @ y)
    r_inv = scipy.linalg.solve_triangular(r, np.eye(p))
    gram_inverse = r_inv @ r_inv.T
    residuals = y - D @ coef
    edf = float(p)
    return LsFit(
        coef=coef,
        residuals=residuals,
        gram_inverse=gram_inverse,
        sigma2=_residual_variance(float(residuals @ residuals), n, edf),
        lam=0.0,
        edf=edf,
    )


def penalized_ls(design: DesignMatrix, y, S, lam: float) -> LsFit:
    """Minimize ||y - D b||^2 + lam b'Sb."""
    if lam < 0 or not np.isfinite(lam):
        raise ValueError(f"lambda must be finite and >= 0, got {lam}")
    S = _check_penalty(S, design.p)
    if lam == 0:
        try:
            return ols(design, y)
        except RankDeficient as e:
            raise SingularSystem(str(e)) from e

    D = design.values
    y = _check_response(y, design.n)
    gram = D.T @ D
    coef, A_inv = solve_spd(gram + lam * S, D.T @ y)
    edf = float(np.trace(A_inv @ gram))
    residuals = y - D @ coef
    return LsFit(
        coef=coef,
        residuals=residuals,
        gram_inverse=A_inv,
        sigma2=_residual_variance(float(residuals @ residuals), design.n, edf),
        lam=float(lam),
        edf=edf,
    )


# ============================================================================
# Penalized IRLS (logistic)
# ============================================================================

def _penalized_deviance(D: np.ndarray, y: np.ndarray, beta: np.ndarray, S_eff: np.ndarray) -> float:
    eta = D @ beta
    loglik = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    return -2.0 * loglik + float(beta @ S_eff @ beta)


def _working_weights(eta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mu = np.clip(expit(eta), 1e-15, 1.0 - 1e-15)
    return mu, mu * (1.0 - mu)


def penalized_irls(
    design: DesignMatrix,
    y,
    S=None,
    lam: float = 0.0,
    max_iter: int = IRLS_MAX_ITER,
    tol: float = IRLS_TOL,
) -> IrlsFit:
    """
    Maximize the penalized Bernoulli log-likelihood l(b) - lam/2 b'Sb by
    Newton steps with step halving on objective increase.

    Raises:
        QuasiSeparation: a linear predictor exceeds 30 in absolute value
        NotConverged: no convergence within max_iter (carries the last iterate)
    """
    D = design.values
    n, p = D.shape
    y = _check_response(y, n)
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("penalized_irls needs a 0/1 response")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    S_eff = lam * _check_penalty(S, p)

    beta = np.zeros(p)
    objective = _penalized_deviance(D, y, beta, S_eff)
    objective_path = [objective]
    converged = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        eta = D @ beta
        mu, w = _working_weights(eta)
        z = eta + (y - mu) / w
        try:
            proposal, _ = solve_spd(D.T @ (w[:, None] * D) + S_eff, D.T @ (w * z))
        except SingularSystem as e:
            logger.debug(f"IRLS stopped at iteration {iterations}: {e}")
            break

        new_objective = _penalized_deviance(D, y, proposal, S_eff)
        halvings = 0
        while new_objective > objective and halvings < MAX_HALVINGS:
            proposal = beta + 0.5 * (proposal - beta)
            new_objective = _penalized_deviance(D, y, proposal, S_eff)
            halvings += 1
        if new_objective > objective:
            # an increase at rounding level means the previous iterate is the optimum
            converged = new_objective - objective <= OBJECTIVE_SLACK * max(abs(objective), 1.0)
            logger.debug(f"IRLS stopped at iteration {iterations}: no decrease after {halvings} halvings")
            break

        change = np.linalg.norm(proposal - beta) / max(np.linalg.norm(proposal), 1.0)
        beta, objective = proposal, new_objective
        objective_path.append(objective)
        logger.debug(f"IRLS iter {iterations}: objective={objective:.10g} change={change:.3g} halvings={halvings}")
        if change < tol:
            converged = True
            break

    eta = D @ beta
    if np.max(np.abs(eta)) > SEPARATION_ETA:
        raise QuasiSeparation(
            f"linear predictor reached {np.max(np.abs(eta)):.1f}; data are (quasi-)separated"
        )

    mu, q = _working_weights(eta)
    weighted_gram = D.T @ (q[:, None] * D)
    try:
        _, A_inv = solve_spd(weighted_gram + S_eff, np.zeros(p))
    except SingularSystem:
        A_inv = np.full((p, p), np.nan)
    loglik = float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    fit = IrlsFit(
        coef=beta,
        mu=mu,
        q_diag=q,
        converged=converged,
        iterations=iterations,
        gram_inverse=A_inv,
        deviance=-2.0 * loglik,
        edf=float(np.trace(A_inv @ weighted_gram)),
        lam=float(lam),
        objective_path=tuple(objective_path),
    )
    if not converged:
        raise NotConverged(f"IRLS stopped after {iterations} of {max_iter} iterations without converging", last=fit)
    return fit


def weighted_gram(design: DesignMatrix, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """D'D, or D'QD when working weights are given."""
    D = design.values
    if weights is None:
        return D.T @ D
    return D.T @ (np.asarray(weights)[:, None] * D)
