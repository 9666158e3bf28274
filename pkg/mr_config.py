"""
Configuration
TOML analysis configuration and environment-driven runtime defaults
"""

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from basis import KnotRule
from dataset import Family
from estimators import CovariateTerm, ModelSpec, get_transform
from mr_errors import ConfigInvalid
from simkit import CAUSAL_FUNCTIONS, H_FORMS, METHODS, PLEIOTROPY, MethodConfig, Scenario
from spmr import SpmrOptions

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
VERSION = "0.1.0"
DEFAULT_SEED = 20240101
DEFAULT_OUTPUT_DIR = "nlmr-out"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


# ============================================================================
# Field helpers
# ============================================================================

_MISSING = object()


def _get(table: Mapping[str, Any], key: str, kind, path: str, default=_MISSING):
    full = f"{path}.{key}" if path else key
    if key not in table:
        if default is _MISSING:
            raise ConfigInvalid(full, "required field is missing")
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and (not isinstance(value, kind) or (kind is int and isinstance(value, bool))):
        raise ConfigInvalid(full, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _table(root: Mapping[str, Any], key: str, path: str = "") -> Mapping[str, Any]:
    return _get(root, key, dict, path, default={})


def _str_tuple(table, key, path, default=()) -> Tuple[str, ...]:
    value = _get(table, key, list, path, default=list(default))
    for i, item in enumerate(value):
        if not isinstance(item, str):
            raise ConfigInvalid(f"{path}.{key}[{i}]", f"expected str, got {type(item).__name__}")
    return tuple(value)


def _num_tuple(table, key, path, kind, default) -> tuple:
    value = _get(table, key, (list, int, float), path, default=default)
    items = value if isinstance(value, list) else [value]
    out = []
    for i, item in enumerate(items):
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ConfigInvalid(f"{path}.{key}[{i}]", f"expected a number, got {type(item).__name__}")
        if kind is int and not isinstance(item, int):
            raise ConfigInvalid(f"{path}.{key}[{i}]", f"expected an integer, got {item!r}")
        out.append(kind(item))
    return tuple(out)


def _family(value: str, path: str) -> Family:
    try:
        return Family(value)
    except ValueError:
        raise ConfigInvalid(path, f"unknown family '{value}' (gaussian | binomial)") from None


def _transform_name(name: str, path: str) -> str:
    try:
        get_transform(name)
    except KeyError as e:
        raise ConfigInvalid(path, str(e.args[0])) from None
    return name


# ============================================================================
# Runtime settings (environment)
# ============================================================================

@dataclass(frozen=True)
class RuntimeSettings:
    """Process defaults from NLMR_* environment variables (CLI flags win)."""
    workers: int = 1
    log_level: str = "INFO"
    output_dir: Optional[str] = None

    @classmethod
    def from_env(cls, environ: Optional[Mapping[str, str]] = None) -> "RuntimeSettings":
        env = os.environ if environ is None else environ
        raw_workers = env.get("NLMR_WORKERS", "1")
        try:
            workers = int(raw_workers)
        except ValueError:
            raise ConfigInvalid("env.NLMR_WORKERS", f"not an integer: {raw_workers!r}") from None
        if workers < 1:
            raise ConfigInvalid("env.NLMR_WORKERS", f"must be >= 1, got {workers}")
        log_level = env.get("NLMR_LOG_LEVEL", "INFO").upper()
        if log_level not in LOG_LEVELS:
            raise ConfigInvalid("env.NLMR_LOG_LEVEL", f"unknown level {log_level!r}")
        return cls(workers=workers, log_level=log_level, output_dir=env.get("NLMR_OUTPUT_DIR") or None)


# ============================================================================
# Sections
# ============================================================================

@dataclass(frozen=True)
class DataSource:
    path: str
    instruments: Tuple[str, ...]
    exposure: str
    outcome: str
    covariates: Tuple[str, ...] = ()
    family: Family = Family.GAUSSIAN

    @classmethod
    def from_dict(cls, table: Mapping[str, Any], path: str = "data") -> "DataSource":
        instruments = _str_tuple(table, "instruments", path)
        if not instruments:
            raise ConfigInvalid(f"{path}.instruments", "at least one instrument column is required")
        source = cls(
            path=_get(table, "path", str, path),
            instruments=instruments,
            exposure=_get(table, "exposure", str, path),
            outcome=_get(table, "outcome", str, path),
            covariates=_str_tuple(table, "covariates", path),
            family=_family(_get(table, "family", str, path, "gaussian"), f"{path}.family"),
        )
        names = source.columns
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise ConfigInvalid(path, f"columns mapped more than once: {duplicates}")
        return source

    @property
    def columns(self) -> Tuple[str, ...]:
        return self.instruments + self.covariates + (self.exposure, self.outcome)

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "instruments": list(self.instruments),
            "covariates": list(self.covariates),
            "exposure": self.exposure,
            "outcome": self.outcome,
            "family": self.family.value,
        }


@dataclass(frozen=True)
class ModelConfig:
    f_basis: Tuple[str, ...] = ("identity",)
    g_transforms: Dict[str, str] = field(default_factory=dict)
    h_form: str = "identity"
    include_iv_stage2: bool = False

    @classmethod
    def from_dict(cls, table: Mapping[str, Any], path: str = "model") -> "ModelConfig":
        f_basis = _str_tuple(table, "f_basis", path, default=("identity",))
        if not f_basis:
            raise ConfigInvalid(f"{path}.f_basis", "at least one transform is required")
        for i, name in enumerate(f_basis):
            _transform_name(name, f"{path}.f_basis[{i}]")
        g_table = _table(table, "g_transforms", path)
        g_transforms = {}
        for column, name in g_table.items():
            if not isinstance(name, str):
                raise ConfigInvalid(f"{path}.g_transforms.{column}", "expected a transform name")
            g_transforms[column] = _transform_name(name, f"{path}.g_transforms.{column}")
        return cls(
            f_basis=f_basis,
            g_transforms=g_transforms,
            h_form=_transform_name(_get(table, "h_form", str, path, "identity"), f"{path}.h_form"),
            include_iv_stage2=_get(table, "include_iv_stage2", bool, path, False),
        )

    def to_model_spec(self, covariates: Tuple[str, ...], family: Family) -> ModelSpec:
        g_basis = None
        if self.g_transforms:
            unknown = sorted(set(self.g_transforms) - set(covariates))
            if unknown:
                raise ConfigInvalid("model.g_transforms", f"not covariate columns: {unknown}")
            g_basis = tuple(
                CovariateTerm(j, get_transform(self.g_transforms.get(name, "identity")),
                              is_linear=self.g_transforms.get(name, "identity") in ("identity", "linear"))
                for j, name in enumerate(covariates)
            )
        return ModelSpec(
            f_basis=tuple(get_transform(name) for name in self.f_basis),
            g_basis=g_basis,
            h_form=get_transform(self.h_form),
            include_iv_stage2=self.include_iv_stage2,
            outcome_family=family,
        )

    def to_dict(self) -> dict:
        return {
            "f_basis": list(self.f_basis),
            "g_transforms": dict(sorted(self.g_transforms.items())),
            "h_form": self.h_form,
            "include_iv_stage2": self.include_iv_stage2,
        }


@dataclass(frozen=True)
class SpmrConfig:
    num_basis: int = 10
    degree: int = 3
    penalty_order: int = 2
    knot_rule: str = "quantile"
    lam: Optional[float] = None
    smooth_delta: bool = False
    smooth_covariates: bool = False
    eval_cap: int = 500

    @classmethod
    def from_dict(cls, table: Mapping[str, Any], path: str = "spmr") -> "SpmrConfig":
        raw_lambda = _get(table, "lambda", (str, int, float), path, "select")
        if isinstance(raw_lambda, str):
            if raw_lambda != "select":
                raise ConfigInvalid(f"{path}.lambda", f"expected 'select' or a number, got {raw_lambda!r}")
            lam = None
        elif isinstance(raw_lambda, bool) or raw_lambda < 0:
            raise ConfigInvalid(f"{path}.lambda", f"must be >= 0, got {raw_lambda!r}")
        else:
            lam = float(raw_lambda)

        config = cls(
            num_basis=_get(table, "num_basis", int, path, 10),
            degree=_get(table, "degree", int, path, 3),
            penalty_order=_get(table, "penalty_order", int, path, 2),
            knot_rule=_get(table, "knot_rule", str, path, "quantile"),
            lam=lam,
            smooth_delta=_get(table, "smooth_delta", bool, path, False),
            smooth_covariates=_get(table, "smooth_covariates", bool, path, False),
            eval_cap=_get(table, "eval_cap", int, path, 500),
        )
        if config.num_basis < 4 or config.num_basis < config.degree + 1:
            raise ConfigInvalid(f"{path}.num_basis", f"need num_basis >= max(4, degree + 1), got {config.num_basis}")
        if config.degree < 1:
            raise ConfigInvalid(f"{path}.degree", f"must be >= 1, got {config.degree}")
        if not 1 <= config.penalty_order < config.num_basis:
            raise ConfigInvalid(f"{path}.penalty_order", f"must lie in [1, num_basis), got {config.penalty_order}")
        if config.knot_rule not in {rule.value for rule in KnotRule}:
            raise ConfigInvalid(f"{path}.knot_rule", f"unknown rule '{config.knot_rule}' (quantile | uniform)")
        if config.eval_cap < 2:
            raise ConfigInvalid(f"{path}.eval_cap", f"must be >= 2, got {config.eval_cap}")
        return config

    def to_options(self, family: Family) -> SpmrOptions:
        return SpmrOptions(
            num_basis=self.num_basis,
            degree=self.degree,
            penalty_order=self.penalty_order,
            knot_rule=KnotRule(self.knot_rule),
            family=family,
            lam=self.lam,
            smooth_delta=self.smooth_delta,
            smooth_covariates=self.smooth_covariates,
            eval_cap=self.eval_cap,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = "select" if out.pop("lam") is None else self.lam
        return out


@dataclass(frozen=True)
class SimulateConfig:
    causal_f: Tuple[str, ...] = ("quad3",)
    pve: Tuple[float, ...] = (0.10,)
    n: Tuple[int, ...] = (1000,)
    replicates: int = 100
    pleiotropy: str = "none"
    h_form: str = "identity"
    exposure_intercept: float = 1.0
    family: Family = Family.GAUSSIAN
    beta_zu: float = 1.0
    beta_zy: float = 1.0
    export_data: bool = False

    @classmethod
    def from_dict(cls, table: Mapping[str, Any], path: str = "simulate") -> "SimulateConfig":
        causal_f = _str_tuple(table, "causal_f", path, default=("quad3",))
        for i, name in enumerate(causal_f):
            if name not in CAUSAL_FUNCTIONS:
                raise ConfigInvalid(f"{path}.causal_f[{i}]", f"unknown causal function '{name}'")
        pve = _num_tuple(table, "pve", path, float, [0.10])
        for i, value in enumerate(pve):
            if not 0.0 < value < 1.0:
                raise ConfigInvalid(f"{path}.pve[{i}]", f"must lie strictly between 0 and 1, got {value}")
        sizes = _num_tuple(table, "n", path, int, [1000])
        for i, value in enumerate(sizes):
            if value < 10:
                raise ConfigInvalid(f"{path}.n[{i}]", f"must be >= 10, got {value}")
        config = cls(
            causal_f=causal_f,
            pve=pve,
            n=sizes,
            replicates=_get(table, "replicates", int, path, 100),
            pleiotropy=_get(table, "pleiotropy", str, path, "none"),
            h_form=_get(table, "h_form", str, path, "identity"),
            exposure_intercept=_get(table, "exposure_intercept", float, path, 1.0),
            family=_family(_get(table, "family", str, path, "gaussian"), f"{path}.family"),
            beta_zu=_get(table, "beta_zu", float, path, 1.0),
            beta_zy=_get(table, "beta_zy", float, path, 1.0),
            export_data=_get(table, "export_data", bool, path, False),
        )
        if config.replicates < 1:
            raise ConfigInvalid(f"{path}.replicates", f"must be >= 1, got {config.replicates}")
        if config.pleiotropy not in PLEIOTROPY:
            raise ConfigInvalid(f"{path}.pleiotropy", f"unknown pleiotropy '{config.pleiotropy}'")
        if config.h_form not in H_FORMS:
            raise ConfigInvalid(f"{path}.h_form", f"unknown h form '{config.h_form}'")
        return config

    def scenarios(self, seed: int) -> list:
        """Grid cells in causal_f x pve x n order."""
        return [
            Scenario(
                causal_f=f, n=n, pve=pve,
                exposure_intercept=self.exposure_intercept,
                pleiotropy=self.pleiotropy,
                h_form=self.h_form,
                outcome_family=self.family,
                replicates=self.replicates,
                base_seed=seed,
                beta_zu=self.beta_zu,
                beta_zy=self.beta_zy,
            )
            for f in self.causal_f for pve in self.pve for n in self.n
        ]

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(causal_f=list(self.causal_f), pve=list(self.pve), n=list(self.n), family=self.family.value)
        return out


@dataclass(frozen=True)
class OutputConfig:
    dir: Optional[str] = None
    report: str = "report.json"
    curve: str = "curve.csv"
    summary: str = "summary.csv"

    @classmethod
    def from_dict(cls, table: Mapping[str, Any], path: str = "output") -> "OutputConfig":
        return cls(
            dir=_get(table, "dir", str, path, None),
            report=_get(table, "report", str, path, "report.json"),
            curve=_get(table, "curve", str, path, "curve.csv"),
            summary=_get(table, "summary", str, path, "summary.csv"),
        )

    def to_dict(self) -> dict:
        return asdict(self)


# ============================================================================
# Analysis configuration
# ============================================================================

@dataclass(frozen=True)
class AnalysisConfig:
    method_id: str
    seed: int = DEFAULT_SEED
    data: Optional[DataSource] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    spmr: SpmrConfig = field(default_factory=SpmrConfig)
    simulate: Optional[SimulateConfig] = None
    output: OutputConfig = field(default_factory=OutputConfig)
    curve_grid: Optional[str] = None
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "AnalysisConfig":
        version = _get(raw, "schema_version", int, "")
        if version != SCHEMA_VERSION:
            raise ConfigInvalid("schema_version", f"unsupported version {version}, expected {SCHEMA_VERSION}")

        method = _table(raw, "method")
        method_id = _get(method, "id", str, "method")
        if method_id not in METHODS:
            raise ConfigInvalid("method.id", f"unknown estimator '{method_id}'")

        curve = _table(raw, "curve")
        grid = _get(curve, "grid", str, "curve", None)
        if grid is not None:
            parse_grid(grid, "curve.grid")

        return cls(
            method_id=method_id,
            seed=_get(raw, "seed", int, "", DEFAULT_SEED),
            data=DataSource.from_dict(raw["data"]) if "data" in raw else None,
            model=ModelConfig.from_dict(_table(raw, "model")),
            spmr=SpmrConfig.from_dict(_table(raw, "spmr")),
            simulate=SimulateConfig.from_dict(raw["simulate"]) if "simulate" in raw else None,
            output=OutputConfig.from_dict(_table(raw, "output")),
            curve_grid=grid,
        )

    def validate_for(self, command: str) -> None:
        """Cross-section checks that depend on the subcommand."""
        if command in ("fit", "curve") and self.data is None:
            raise ConfigInvalid("data", f"'{command}' needs a [data] section")
        if command == "curve" and self.method_id != "spmr":
            raise ConfigInvalid("method.id", "curves are only available for method 'spmr'")
        if command == "simulate" and self.simulate is None:
            raise ConfigInvalid("simulate", "'simulate' needs a [simulate] section")

        family = self.simulate.family if command == "simulate" else self.data.family
        section = "simulate.family" if command == "simulate" else "data.family"
        if self.method_id == "control_fn_binary" and family is not Family.BINOMIAL:
            raise ConfigInvalid(section, "method 'control_fn_binary' needs family 'binomial'")
        if self.method_id in ("twostage_pred", "control_fn", "linear_mr") and family is not Family.GAUSSIAN:
            raise ConfigInvalid(section, f"method '{self.method_id}' needs family 'gaussian'")

    def method_config(self) -> MethodConfig:
        return MethodConfig(
            id=self.method_id,
            f_basis=self.model.f_basis if self.model.f_basis != ("identity",) else None,
            include_iv_stage2=self.model.include_iv_stage2,
            h_form=self.model.h_form,
            spmr=self.spmr.to_options(self.simulate.family if self.simulate else Family.GAUSSIAN),
        )

    def to_dict(self) -> dict:
        out: Dict[str, Any] = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "method": {"id": self.method_id},
            "model": self.model.to_dict(),
            "spmr": self.spmr.to_dict(),
            "output": {k: v for k, v in self.output.to_dict().items() if v is not None},
        }
        if self.data is not None:
            out["data"] = self.data.to_dict()
        if self.simulate is not None:
            out["simulate"] = self.simulate.to_dict()
        if self.curve_grid is not None:
            out["curve"] = {"grid": self.curve_grid}
        return out


def parse_grid(text: str, path: str = "--grid") -> np.ndarray:
    """'lo:hi:steps' -> evenly spaced grid with `steps` points."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigInvalid(path, f"expected lo:hi:steps, got {text!r}")
    try:
        lo, hi, steps = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ConfigInvalid(path, f"expected numbers in lo:hi:steps, got {text!r}") from None
    if not lo < hi or steps < 2:
        raise ConfigInvalid(path, f"need lo < hi and steps >= 2, got {text!r}")
    return np.linspace(lo, hi, steps)


def load_config(path) -> AnalysisConfig:
    path = Path(path)
    try:
        with path.open("rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigInvalid("config", f"file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigInvalid("config", f"invalid TOML in {path}: {e}") from None
    config = AnalysisConfig.from_dict(raw)
    logger.info(f"loaded config {path} (method {config.method_id})")
    return config
