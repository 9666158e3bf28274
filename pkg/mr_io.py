"""
Data and Result I/O
CSV ingestion and export, result tables and the JSON run report
"""

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from dataset import DataSet, Family
from mr_config import DataSource
from mr_errors import EmptyAfterFiltering, MissingColumn, NlmrWarning, NonNumericCell

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


# ============================================================================
# CSV ingestion
# ============================================================================

def _first_bad_cell(series: pd.Series) -> Optional[int]:
    for position, value in enumerate(series):
        if pd.isna(value):
            continue
        try:
            float(value)
        except (TypeError, ValueError):
            return position
    return None


def load_csv(path, source: DataSource) -> DataSet:
    """
    Read the mapped columns of a CSV file into a DataSet.

    Rows with a missing mapped value are dropped with one NlmrWarning giving
    the count. Row numbers in errors are 1-based data rows (header excluded).
    """
    path = Path(path)
    frame = pd.read_csv(path, float_precision="round_trip", skipinitialspace=True)

    missing = [name for name in source.columns if name not in frame.columns]
    if missing:
        raise MissingColumn(f"{path.name}: columns not in header: {missing}")
    frame = frame.loc[:, list(source.columns)]

    for name in source.columns:
        column = frame[name]
        if not pd.api.types.is_numeric_dtype(column):
            position = _first_bad_cell(column)
            if position is not None:
                raise NonNumericCell(
                    f"{path.name}: non-numeric value {column.iloc[position]!r} in column '{name}' at row {position + 1}",
                    row=position + 1, column=name,
                )
            frame[name] = column.astype(float)

    complete = frame.notna().all(axis=1)
    dropped = int((~complete).sum())
    if dropped:
        message = f"{path.name}: dropped {dropped} row(s) with missing values"
        logger.warning(message)
        warnings.warn(message, NlmrWarning, stacklevel=2)
    if not complete.any():
        raise EmptyAfterFiltering(f"{path.name}: no complete rows in the mapped columns")

    if source.family is Family.BINOMIAL:
        outcome = frame[source.outcome]
        bad = complete & ~outcome.isin([0.0, 1.0])
        if bad.any():
            position = int(np.flatnonzero(bad.to_numpy())[0])
            raise NonNumericCell(
                f"{path.name}: binomial outcome '{source.outcome}' must be 0/1, "
                f"row {position + 1} has {outcome.iloc[position]!r}",
                row=position + 1, column=source.outcome,
            )

    kept = frame.loc[complete]
    logger.info(f"loaded {len(kept)} rows from {path}")
    return DataSet(
        z=kept.loc[:, list(source.instruments)].to_numpy(dtype=float),
        c=kept.loc[:, list(source.covariates)].to_numpy(dtype=float).reshape(len(kept), len(source.covariates)),
        x=kept[source.exposure].to_numpy(dtype=float),
        y=kept[source.outcome].to_numpy(dtype=float),
        family=source.family,
        z_names=source.instruments,
        c_names=source.covariates,
        x_name=source.exposure,
        y_name=source.outcome,
    )


def write_table(frame: pd.DataFrame, path) -> Path:
    """CSV with 17 significant digits so doubles survive the round trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def dataset_frame(data: DataSet) -> pd.DataFrame:
    columns: Dict[str, np.ndarray] = {}
    for j, name in enumerate(data.z_names):
        columns[name] = data.z[:, j]
    for j, name in enumerate(data.c_names):
        columns[name] = data.c[:, j]
    columns[data.x_name] = data.x
    columns[data.y_name] = data.y
    return pd.DataFrame(columns)


def write_dataset_csv(data: DataSet, path) -> Path:
    return write_table(dataset_frame(data), path)


def coefficient_frame(labels: Sequence[str], estimates, ses) -> pd.DataFrame:
    return pd.DataFrame({"term": list(labels), "estimate": np.asarray(estimates), "se": np.asarray(ses)})


# ============================================================================
# Run report
# ============================================================================

@dataclass
class RunReport:
    """Everything a run produced; `timing` is the only non-deterministic field."""
    command: str
    version: str
    seed: int
    config: Dict[str, Any]
    coefficients: List[Dict[str, Any]] = field(default_factory=list)
    tests: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    summary: List[Dict[str, Any]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    timing: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    def add_warning(self, message: str) -> None:
        self.warnings.append(message)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        logger.info(f"report written to {path}")
        return path


def _plain(value):
    """Convert numpy scalars/arrays and tuples into JSON-native values; NaN and inf become null."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Enum):
        return value.value
    return value
