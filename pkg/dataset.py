"""
Observed data container shared by the estimators, the simulator and CSV ingestion.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple

import numpy as np

from mr_errors import NonFinite, NonNumericCell

logger = logging.getLogger(__name__)


class Family(Enum):
    """Outcome family of the second-stage regression."""
    GAUSSIAN = "gaussian"
    BINOMIAL = "binomial"


def _as_matrix(values, n: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else np.empty((n, 0))
    if arr.shape[0] != n:
        raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
    return arr


@dataclass(frozen=True)
class DataSet:
    """Instruments Z, covariates C, exposure X and outcome Y for n observations."""
    z: np.ndarray
    c: np.ndarray
    x: np.ndarray
    y: np.ndarray
    family: Family = Family.GAUSSIAN
    z_names: Tuple[str, ...] = field(default=())
    c_names: Tuple[str, ...] = field(default=())
    x_name: str = "x"
    y_name: str = "y"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        n = x.shape[0]
        if y.shape[0] != n:
            raise ValueError(f"outcome has {y.shape[0]} rows, exposure has {n}")
        z = _as_matrix(self.z, n, "instruments")
        c = _as_matrix(self.c, n, "covariates")
        if z.shape[1] < 1:
            raise ValueError("at least one instrument column is required")
        for name, arr in (("instruments", z), ("covariates", c), ("exposure", x), ("outcome", y)):
            if not np.isfinite(arr).all():
                raise NonFinite(f"{name} contains NaN or Inf", module="dataset")
        if self.family is Family.BINOMIAL:
            bad = np.flatnonzero((y != 0.0) & (y != 1.0))
            if bad.size:
                raise NonNumericCell(
                    f"binomial outcome must be 0/1, row {int(bad[0])} has {y[bad[0]]!r}",
                    row=int(bad[0]), column=self.y_name,
                )

        z_names = self.z_names or tuple(f"z{j + 1}" for j in range(z.shape[1]))
        c_names = self.c_names or tuple(f"c{j + 1}" for j in range(c.shape[1]))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "z_names", tuple(z_names))
        object.__setattr__(self, "c_names", tuple(c_names))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n_instruments(self) -> int:
        return self.z.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.c.shape[1]
