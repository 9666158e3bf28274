"""
Monte Carlo Harness
Data-generating processes, counter-based seeding, replicate execution and
aggregation of bias, SE calibration, coverage and rejection rates
"""

import asyncio
import logging
import math
import time
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from dataset import DataSet, Family
from estimators import ESTIMATORS, ModelSpec, get_transform
from inference import f_test
from mr_errors import InvalidPve, NlmrError, NlmrWarning, ReplicateFailureRate
from spmr import SpmrOptions, evaluation_points, fit_spmr, spmr_test

logger = logging.getLogger(__name__)

CAUSAL_FUNCTIONS = ("linear", "quad3", "sin", "exp3", "null")
PLEIOTROPY = ("none", "uncorrelated", "correlated", "both")
H_FORMS = ("identity", "quad3", "sin", "exp3", "cos")
PARAMETRIC_METHODS = ("twostage_pred", "control_fn", "linear_mr", "control_fn_binary")
METHODS = PARAMETRIC_METHODS + ("spmr",)

# unit-variance components of X not explained by Z: C, U_{-Z}, eps_X
RESIDUAL_EXPOSURE_VARIANCE = 3.0
FAILURE_LIMIT = 0.05
ALPHA = 0.05
Z95 = 1.959963984540054

# stable stream identifiers; never renumber
VARIABLE_IDS = {"z": 0, "c": 1, "u_minus_z": 2, "eps_x": 3, "e": 4, "bernoulli": 5}


# ============================================================================
# Data Models
# ============================================================================

@dataclass(frozen=True)
class Scenario:
    causal_f: str = "quad3"
    n: int = 1000
    pve: float = 0.10
    exposure_intercept: float = 1.0
    pleiotropy: str = "none"
    h_form: str = "identity"
    outcome_family: Family = Family.GAUSSIAN
    replicates: int = 100
    base_seed: int = 20240101
    beta_zu: float = 1.0
    beta_zy: float = 1.0
    beta_z: Optional[float] = None

    def __post_init__(self):
        if self.causal_f not in CAUSAL_FUNCTIONS:
            raise ValueError(f"causal_f must be one of {CAUSAL_FUNCTIONS}, got {self.causal_f!r}")
        if self.pleiotropy not in PLEIOTROPY:
            raise ValueError(f"pleiotropy must be one of {PLEIOTROPY}, got {self.pleiotropy!r}")
        if self.h_form not in H_FORMS:
            raise ValueError(f"h_form must be one of {H_FORMS}, got {self.h_form!r}")
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if isinstance(self.outcome_family, str):
            object.__setattr__(self, "outcome_family", Family(self.outcome_family))

    @property
    def truth(self) -> float:
        return 0.0 if self.causal_f == "null" else 1.0

    @property
    def correlated(self) -> bool:
        return self.pleiotropy in ("correlated", "both")

    @property
    def uncorrelated(self) -> bool:
        return self.pleiotropy in ("uncorrelated", "both")

    def label(self) -> str:
        return f"{self.causal_f}/n={self.n}/pve={self.pve:g}/{self.pleiotropy}/h={self.h_form}/{self.outcome_family.value}"


@dataclass(frozen=True)
class MethodConfig:
    """Estimator id plus the options the replicate fit needs."""
    id: str = "control_fn"
    f_basis: Optional[Tuple[str, ...]] = None
    include_iv_stage2: bool = False
    h_form: str = "identity"
    spmr: SpmrOptions = field(default_factory=SpmrOptions)

    def __post_init__(self):
        if self.id not in METHODS:
            raise ValueError(f"method id must be one of {METHODS}, got {self.id!r}")

    def model_spec(self, sc: Scenario) -> ModelSpec:
        names = self.f_basis or (("identity",) if sc.causal_f == "null" else (sc.causal_f,))
        return ModelSpec(
            f_basis=tuple(get_transform(name) for name in names),
            h_form=get_transform(self.h_form),
            include_iv_stage2=self.include_iv_stage2,
            outcome_family=sc.outcome_family,
        )


@dataclass(frozen=True)
class ReplicateOutcome:
    rep_index: int
    estimate: float = float("nan")
    se: float = float("nan")
    covers: bool = False
    covers_excl_zero: bool = False
    reject: bool = False
    p_value: float = float("nan")
    first_stage_r2: float = float("nan")
    curve_corr: float = float("nan")
    error: Optional[str] = None
    warning_messages: Tuple[str, ...] = ()


@dataclass(frozen=True)
class SimSummary:
    scenario: Scenario
    method: str
    mean_estimate: float
    mc_sd: float
    mean_model_se: float
    coverage95: float
    coverage_excl_zero: float
    rejection_rate: float
    mean_first_stage_r2: float
    median_curve_corr: float
    replicates_ok: int
    failures: int
    failure_kinds: Dict[str, int]
    wall_time: float

    def to_row(self) -> dict:
        row = {k: v for k, v in asdict(self.scenario).items()}
        row["outcome_family"] = self.scenario.outcome_family.value
        row.update(
            method=self.method,
            mean_estimate=self.mean_estimate,
            mc_sd=self.mc_sd,
            mean_model_se=self.mean_model_se,
            coverage95=self.coverage95,
            coverage_excl_zero=self.coverage_excl_zero,
            rejection_rate=self.rejection_rate,
            mean_first_stage_r2=self.mean_first_stage_r2,
            median_curve_corr=self.median_curve_corr,
            replicates_ok=self.replicates_ok,
            failures=self.failures,
        )
        return row


# ============================================================================
# Data generation
# ============================================================================

def pve_to_beta(pve: float, sc: Scenario) -> float:
    """
    Instrument coefficient giving the requested share of Var(X) explained by Z.

    Under correlated pleiotropy Z also reaches X through U, so the total Z
    effect beta_Z + beta_ZU is matched and beta_Z is the remainder.
    """
    if not 0.0 < pve < 1.0:
        raise InvalidPve(f"pve must lie strictly between 0 and 1, got {pve}")
    total = math.sqrt(RESIDUAL_EXPOSURE_VARIANCE * pve / (1.0 - pve))
    return total - sc.beta_zu if sc.correlated else total


def stream(base_seed: int, rep_index: int, variable: str) -> np.random.Generator:
    """Independent Philox stream keyed by (base_seed, rep_index, variable)."""
    seq = np.random.SeedSequence(entropy=base_seed, spawn_key=(rep_index, VARIABLE_IDS[variable]))
    return np.random.Generator(np.random.Philox(seq))


def causal_function(name: str, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if name == "null":
        return np.zeros_like(x)
    return get_transform(name)(x)


def gen_dataset(sc: Scenario, rep_index: int) -> DataSet:
    """Draw one replicate; all primitives are independent standard normals."""
    n = sc.n

    def normal(variable: str) -> np.ndarray:
        return stream(sc.base_seed, rep_index, variable).standard_normal(n)

    z, c = normal("z"), normal("c")
    u = normal("u_minus_z")
    if sc.correlated:
        u = u + sc.beta_zu * z
    delta1 = u + normal("eps_x")

    beta_z = pve_to_beta(sc.pve, sc) if sc.beta_z is None else sc.beta_z
    x = sc.exposure_intercept + beta_z * z + c + delta1

    h = get_transform(sc.h_form)
    direct = sc.beta_zy * z if sc.uncorrelated else 0.0
    linear = 1.0 + causal_function(sc.causal_f, x) + direct + c

    if sc.outcome_family is Family.BINOMIAL:
        prob = expit(linear + h(delta1))
        y = (stream(sc.base_seed, rep_index, "bernoulli").random(n) < prob).astype(float)
    else:
        y = linear + h(delta1) + normal("e")

    return DataSet(z=z, c=c, x=x, y=y, family=sc.outcome_family)


def centered_truth(sc: Scenario, x_train, grid) -> np.ndarray:
    """True causal function on grid, centered to mean zero over the training exposures."""
    offset = float(np.mean(causal_function(sc.causal_f, x_train)))
    return causal_function(sc.causal_f, grid) - offset


# ============================================================================
# Replicates
# ============================================================================

def run_replicate(sc: Scenario, method: MethodConfig, rep_index: int) -> ReplicateOutcome:
    """
    Fit one replicate; NlmrError is recorded on the outcome, not raised.

    NlmrWarnings are captured onto the outcome so they survive a worker process.
    """
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NlmrWarning)
        outcome = _fit_replicate(sc, method, rep_index)

    messages = []
    for w in caught:
        if issubclass(w.category, NlmrWarning):
            messages.append(str(w.message))
        else:
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    return replace(outcome, warning_messages=tuple(messages)) if messages else outcome


def _fit_replicate(sc: Scenario, method: MethodConfig, rep_index: int) -> ReplicateOutcome:
    try:
        data = gen_dataset(sc, rep_index)
        if method.id == "spmr":
            return _spmr_replicate(sc, method, data, rep_index)
        return _parametric_replicate(sc, method, data, rep_index)
    except NlmrError as e:
        logger.debug(f"replicate {rep_index} of {sc.label()} failed: {e.describe()}")
        return ReplicateOutcome(rep_index, error=type(e).__name__)


def _parametric_replicate(sc: Scenario, method: MethodConfig, data: DataSet, rep_index: int) -> ReplicateOutcome:
    fit = ESTIMATORS[method.id](data, method.model_spec(sc))
    j = fit.theta_index[0]
    estimate = float(fit.B_hat[j])
    se = float(fit.se[j])
    covers = abs(estimate - sc.truth) <= Z95 * se
    excludes_zero = abs(estimate) > Z95 * se
    test = f_test(fit, fit.cov)
    return ReplicateOutcome(
        rep_index=rep_index,
        estimate=estimate,
        se=se,
        covers=covers,
        covers_excl_zero=covers and excludes_zero,
        reject=test.p_value < ALPHA,
        p_value=test.p_value,
        first_stage_r2=fit.stage1.first_stage_r2,
    )


def _spmr_replicate(sc: Scenario, method: MethodConfig, data: DataSet, rep_index: int) -> ReplicateOutcome:
    options = replace(method.spmr, family=sc.outcome_family)
    fit = fit_spmr(data, options)
    test = spmr_test(fit)

    curve_corr = float("nan")
    if sc.causal_f != "null":
        grid = evaluation_points(data.x, options.eval_cap)
        f_hat = fit.smooth_x.evaluate(grid) @ fit.theta
        truth = centered_truth(sc, data.x, grid)
        if np.std(f_hat) > 0 and np.std(truth) > 0:
            curve_corr = float(np.corrcoef(f_hat, truth)[0, 1])

    return ReplicateOutcome(
        rep_index=rep_index,
        estimate=fit.edf_x,
        reject=test.p_value < ALPHA,
        p_value=test.p_value,
        first_stage_r2=fit.stage1.first_stage_r2,
        curve_corr=curve_corr,
    )


# ============================================================================
# Aggregation
# ============================================================================

def _mean(values: List[float]) -> float:
    return math.fsum(values) / len(values) if values else float("nan")


def _sd(values: List[float]) -> float:
    if len(values) < 2:
        return float("nan")
    m = _mean(values)
    return math.sqrt(math.fsum((v - m) ** 2 for v in values) / (len(values) - 1))


def summarize(sc: Scenario, method: MethodConfig, outcomes: List[ReplicateOutcome], wall_time: float) -> SimSummary:
    """Aggregate replicate outcomes; results do not depend on their order."""
    outcomes = sorted(outcomes, key=lambda o: o.rep_index)
    ok = [o for o in outcomes if o.error is None]
    failed = Counter(o.error for o in outcomes if o.error is not None)
    n_failed = sum(failed.values())
    if outcomes and n_failed / len(outcomes) > FAILURE_LIMIT:
        raise ReplicateFailureRate(
            f"{n_failed} of {len(outcomes)} replicates failed for {sc.label()} ({dict(failed)})"
        )
    if n_failed:
        logger.warning(f"{n_failed} failed replicates excluded from {sc.label()}: {dict(failed)}")

    estimates = [o.estimate for o in ok]
    ses = [o.se for o in ok if np.isfinite(o.se)]
    corrs = [o.curve_corr for o in ok if np.isfinite(o.curve_corr)]
    count = len(ok)
    # coverage needs interval estimates; spMR replicates carry none
    has_intervals = bool(count and ses)
    return SimSummary(
        scenario=sc,
        method=method.id,
        mean_estimate=_mean(estimates),
        mc_sd=_sd(estimates),
        mean_model_se=_mean(ses),
        coverage95=sum(o.covers for o in ok) / count if has_intervals else float("nan"),
        coverage_excl_zero=sum(o.covers_excl_zero for o in ok) / count if has_intervals else float("nan"),
        rejection_rate=sum(o.reject for o in ok) / count if count else float("nan"),
        mean_first_stage_r2=_mean([o.first_stage_r2 for o in ok]),
        median_curve_corr=float(np.median(corrs)) if corrs else float("nan"),
        replicates_ok=count,
        failures=n_failed,
        failure_kinds=dict(sorted(failed.items())),
        wall_time=wall_time,
    )


# ============================================================================
# Runners
# ============================================================================

def _reemit_warnings(sc: Scenario, outcomes: List[ReplicateOutcome]) -> None:
    """Raise the captured replicate warnings again in replicate order."""
    for outcome in sorted(outcomes, key=lambda o: o.rep_index):
        for message in outcome.warning_messages:
            warnings.warn(f"{sc.label()} replicate {outcome.rep_index}: {message}", NlmrWarning, stacklevel=3)


async def run_mc_async(
    sc: Scenario,
    method: MethodConfig,
    replicates: Optional[int] = None,
    workers: int = 1,
    batch_size: int = 50,
) -> SimSummary:
    """Run replicates in a process pool (workers > 1) or inline, batch by batch."""
    if method.id == "control_fn_binary" and sc.outcome_family is not Family.BINOMIAL:
        raise ValueError("control_fn_binary needs a binomial scenario")
    if method.id in ("twostage_pred", "control_fn", "linear_mr") and sc.outcome_family is not Family.GAUSSIAN:
        raise ValueError(f"{method.id} needs a gaussian scenario")

    total = replicates or sc.replicates
    started = time.perf_counter()
    outcomes: List[ReplicateOutcome] = []
    loop = asyncio.get_running_loop()

    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for first in range(0, total, batch_size):
            indices = range(first, min(first + batch_size, total))
            if executor is None:
                outcomes.extend(run_replicate(sc, method, i) for i in indices)
            else:
                futures = [loop.run_in_executor(executor, run_replicate, sc, method, i) for i in indices]
                outcomes.extend(await asyncio.gather(*futures))
            logger.info(f"{sc.label()} [{method.id}]: {len(outcomes)}/{total} replicates done")
            await asyncio.sleep(0)
    finally:
        if executor is not None:
            executor.shutdown()

    _reemit_warnings(sc, outcomes)
    return summarize(sc, method, outcomes, time.perf_counter() - started)


def run_mc(sc: Scenario, method: MethodConfig, replicates: Optional[int] = None, workers: int = 1) -> SimSummary:
    return asyncio.run(run_mc_async(sc, method, replicates, workers))


async def run_grid(scenarios: List[Scenario], method: MethodConfig, workers: int = 1) -> List[SimSummary]:
    """Scenarios run one after another; each uses the worker pool internally."""
    summaries = []
    for sc in scenarios:
        summaries.append(await run_mc_async(sc, method, workers=workers))
    return summaries
