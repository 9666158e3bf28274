"""
Spline Bases
B-spline designs, difference penalties and sum-to-zero centering for smooth terms
"""

import logging
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.interpolate import BSpline

from linmod import DesignMatrix
from mr_errors import DegenerateKnots, InvalidOrder, NlmrWarning

logger = logging.getLogger(__name__)


class KnotRule(Enum):
    QUANTILE = "quantile"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class BasisSpec:
    """Cubic P-spline by default: 10 basis functions, quantile interior knots."""
    num_basis: int = 10
    degree: int = 3
    knot_rule: KnotRule = KnotRule.QUANTILE
    boundary: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.num_basis < 4:
            raise ValueError(f"num_basis must be >= 4, got {self.num_basis}")
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")
        if self.num_basis < self.degree + 1:
            raise ValueError(f"num_basis {self.num_basis} < degree + 1 = {self.degree + 1}")
        if self.boundary is not None:
            lo, hi = self.boundary
            if not lo < hi:
                raise ValueError(f"boundary must satisfy lo < hi, got {self.boundary}")
            object.__setattr__(self, "boundary", (float(lo), float(hi)))
        if isinstance(self.knot_rule, str):
            object.__setattr__(self, "knot_rule", KnotRule(self.knot_rule))


@dataclass(frozen=True)
class SmoothBasis:
    """Centered smooth term: design columns sum to zero over the training data."""
    design: DesignMatrix
    penalty: np.ndarray
    knots: np.ndarray
    center_transform: np.ndarray
    basis_spec: BasisSpec
    label: str = "x"

    @property
    def width(self) -> int:
        return self.center_transform.shape[1]

    def evaluate(self, x) -> np.ndarray:
        """Centered basis rows at x (clamped to the training boundary)."""
        raw, _ = bspline_design(x, self.basis_spec, knots=self.knots)
        return raw @ self.center_transform

    def derivative(self, x) -> np.ndarray:
        """d/dx of the centered basis rows at x."""
        lo, hi = self.basis_spec.boundary
        x = np.clip(np.asarray(x, dtype=float).ravel(), lo, hi)
        k = self.basis_spec.num_basis
        spline = BSpline(self.knots, np.eye(k), self.basis_spec.degree, extrapolate=True)
        return spline.derivative()(x) @ self.center_transform


# ============================================================================
# Construction
# ============================================================================

def _resolve_boundary(x: np.ndarray, spec: BasisSpec) -> BasisSpec:
    if spec.boundary is not None:
        return spec
    lo, hi = float(np.min(x)), float(np.max(x))
    if not lo < hi:
        raise DegenerateKnots(f"all abscissae equal {lo}; cannot place knots")
    return replace(spec, boundary=(lo, hi))


def _place_knots(x: np.ndarray, spec: BasisSpec) -> np.ndarray:
    lo, hi = spec.boundary
    k, degree = spec.num_basis, spec.degree
    n_interior = k - degree - 1

    if np.unique(x).size < k:
        raise DegenerateKnots(f"{np.unique(x).size} distinct values, need at least {k}")

    probs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
    if spec.knot_rule is KnotRule.QUANTILE:
        interior = np.quantile(x, probs)
    else:
        interior = lo + probs * (hi - lo)

    if n_interior and (np.any(np.diff(interior) <= 0) or interior[0] <= lo or interior[-1] >= hi):
        raise DegenerateKnots(f"interior knots not strictly inside ({lo}, {hi}): {interior}")

    return np.concatenate([np.repeat(lo, degree + 1), interior, np.repeat(hi, degree + 1)])


def bspline_design(x, spec: BasisSpec, knots: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Raw B-spline design (n x k) and its knot vector.

    Abscissae outside the boundary are clamped with an NlmrWarning. When
    `knots` is given (prediction), they are reused as-is.
    """
    x = np.asarray(x, dtype=float).ravel()
    if knots is None:
        spec = _resolve_boundary(x, spec)
        knots = _place_knots(x, spec)
    elif spec.boundary is None:
        spec = replace(spec, boundary=(float(knots[0]), float(knots[-1])))

    lo, hi = spec.boundary
    outside = (x < lo) | (x > hi)
    if outside.any():
        message = f"{int(outside.sum())} abscissae outside [{lo:.6g}, {hi:.6g}] clamped to the boundary"
        logger.warning(message)
        warnings.warn(message, NlmrWarning, stacklevel=2)
        x = np.clip(x, lo, hi)

    raw = BSpline.design_matrix(x, knots, spec.degree).toarray()
    return raw, knots


def diff_penalty(k: int, order: int = 2) -> np.ndarray:
    """S = D'D with D the (k - order) x k finite-difference matrix."""
    if order < 1 or k <= order:
        raise InvalidOrder(f"difference order {order} needs k > order, got k={k}")
    delta = np.diff(np.eye(k), n=order, axis=0)
    return delta.T @ delta


def center(
    raw: np.ndarray,
    S: np.ndarray,
    knots: Optional[np.ndarray] = None,
    spec: Optional[BasisSpec] = None,
    label: str = "x",
) -> SmoothBasis:
    """Absorb the sum-to-zero constraint into a k x (k-1) reparameterization."""
    raw = np.asarray(raw, dtype=float)
    k = raw.shape[1]
    constraint = raw.sum(axis=0).reshape(-1, 1)
    q, _ = np.linalg.qr(constraint, mode="complete")
    transform = q[:, 1:]

    design = raw @ transform
    penalty = transform.T @ np.asarray(S, dtype=float) @ transform
    penalty = 0.5 * (penalty + penalty.T)

    labels = tuple(f"s({label}).{j + 1}" for j in range(k - 1))
    if spec is None:
        spec = BasisSpec(num_basis=k)
    if knots is None:
        knots = np.array([])
    return SmoothBasis(
        design=DesignMatrix(design, labels),
        penalty=penalty,
        knots=np.asarray(knots, dtype=float),
        center_transform=transform,
        basis_spec=spec,
        label=label,
    )


def make_smooth(x, spec: Optional[BasisSpec] = None, order: int = 2, label: str = "x") -> SmoothBasis:
    """Build the centered P-spline term for training abscissae x."""
    spec = spec or BasisSpec()
    x = np.asarray(x, dtype=float).ravel()
    resolved = _resolve_boundary(x, spec)
    raw, knots = bspline_design(x, resolved)
    smooth = center(raw, diff_penalty(resolved.num_basis, order), knots, resolved, label)
    logger.debug(f"smooth s({label}): k={resolved.num_basis}, boundary={resolved.boundary}")
    return smooth
