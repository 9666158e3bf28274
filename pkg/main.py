#!/usr/bin/env python3
"""
nlmr - Nonlinear Mendelian Randomization

Command-line entry point:

    nlmr fit --config analysis.toml
    nlmr simulate --config grid.toml [--workers N]
    nlmr curve --config analysis.toml --grid lo:hi:steps

Every run writes a JSON RunReport; curve and simulate runs also write a CSV table.
"""

import argparse
import asyncio
import logging
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from dataset import DataSet
from estimators import ESTIMATORS
from inference import f_test
from mr_config import (
    DEFAULT_OUTPUT_DIR,
    LOG_LEVELS,
    VERSION,
    AnalysisConfig,
    RuntimeSettings,
    load_config,
    parse_grid,
)
from mr_errors import NlmrError, NlmrWarning, exit_code_for
from mr_io import RunReport, coefficient_frame, load_csv, write_dataset_csv, write_table
from simkit import gen_dataset, run_grid
from spmr import causal_curve, describe_fit, fit_spmr, spmr_test

logger = logging.getLogger(__name__)

COMMANDS = ("fit", "simulate", "curve")
CURVE_POINTS = 101


# ============================================================================
# Command handlers
# ============================================================================

def _load_data(config: AnalysisConfig, base_dir: Path) -> DataSet:
    path = Path(config.data.path)
    if not path.is_absolute():
        path = base_dir / path
    return load_csv(path, config.data)


def _fit_parametric(config: AnalysisConfig, data: DataSet, report: RunReport) -> None:
    spec = config.model.to_model_spec(data.c_names, data.family)
    fit = ESTIMATORS[config.method_id](data, spec)
    table = coefficient_frame(fit.coef_labels, fit.B_hat, fit.se)
    report.coefficients = table.to_dict(orient="records")
    report.tests["f_test"] = f_test(fit, fit.cov).to_dict()
    report.diagnostics.update(
        method_tag=fit.method_tag.value,
        covariance=fit.cov.method.value,
        rho_hat=fit.rho_hat,
        var_e=fit.var_e,
        var_delta1=fit.stage1.var_delta1,
        first_stage_f=fit.stage1.first_stage_f,
        first_stage_r2=fit.stage1.first_stage_r2,
        n=data.n,
    )


def _fit_spmr(config: AnalysisConfig, data: DataSet, report: RunReport):
    fit = fit_spmr(data, config.spmr.to_options(data.family))
    table = coefficient_frame(fit.W_full.column_labels, fit.B_hat, fit.V_B.se)
    report.coefficients = table.to_dict(orient="records")
    report.tests["smooth_test"] = spmr_test(fit).to_dict()
    report.diagnostics.update(describe_fit(fit))
    report.diagnostics.update(
        first_stage_f=fit.stage1.first_stage_f,
        first_stage_r2=fit.stage1.first_stage_r2,
        n=data.n,
    )
    return fit


def command_fit(config: AnalysisConfig, base_dir: Path, out_dir: Path, report: RunReport, **_) -> None:
    data = _load_data(config, base_dir)
    if config.method_id == "spmr":
        _fit_spmr(config, data, report)
    else:
        _fit_parametric(config, data, report)


def command_curve(config: AnalysisConfig, base_dir: Path, out_dir: Path, report: RunReport,
                  grid: Optional[str] = None, **_) -> None:
    data = _load_data(config, base_dir)
    fit = _fit_spmr(config, data, report)
    spec = grid or config.curve_grid
    if spec is not None:
        points = parse_grid(spec, "--grid" if grid else "curve.grid")
    else:
        points = np.linspace(float(data.x.min()), float(data.x.max()), CURVE_POINTS)
    curve = causal_curve(fit, points)
    write_table(curve.to_frame(), out_dir / config.output.curve)
    report.artifacts["curve"] = config.output.curve
    report.diagnostics["curve_centering"] = curve.reference_centering


def command_simulate(config: AnalysisConfig, base_dir: Path, out_dir: Path, report: RunReport,
                     workers: int = 1, **_) -> None:
    scenarios = config.simulate.scenarios(config.seed)
    method = config.method_config()
    logger.info(f"simulating {len(scenarios)} grid cells with method {method.id} on {workers} worker(s)")

    if config.simulate.export_data:
        for i, sc in enumerate(scenarios):
            name = f"data_{i:03d}.csv"
            write_dataset_csv(gen_dataset(sc, 0), out_dir / name)
            report.artifacts[f"data_{i:03d}"] = name

    summaries = asyncio.run(run_grid(scenarios, method, workers=workers))
    rows = [s.to_row() for s in summaries]
    write_table(pd.DataFrame(rows), out_dir / config.output.summary)
    report.artifacts["summary"] = config.output.summary
    report.summary = rows
    report.diagnostics["failures"] = {s.scenario.label(): s.failure_kinds for s in summaries if s.failures}
    report.timing["replicates_wall_time"] = sum(s.wall_time for s in summaries)


HANDLERS = {"fit": command_fit, "simulate": command_simulate, "curve": command_curve}


# ============================================================================
# Run
# ============================================================================

def run(
    config_path,
    command: str,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    grid: Optional[str] = None,
    settings: Optional[RuntimeSettings] = None,
) -> RunReport:
    """
    Execute one subcommand and write its RunReport.

    Every NlmrWarning raised during the run is recorded exactly once.
    """
    if command not in HANDLERS:
        raise ValueError(f"unknown command '{command}' (expected one of {COMMANDS})")
    settings = settings or RuntimeSettings.from_env()
    config_path = Path(config_path)
    config = load_config(config_path)
    if seed is not None:
        config = replace(config, seed=seed)
    config.validate_for(command)

    out_dir = Path(config.output.dir or settings.output_dir or DEFAULT_OUTPUT_DIR)
    if not out_dir.is_absolute():
        out_dir = config_path.parent / out_dir

    report = RunReport(command=command, version=VERSION, seed=config.seed, config=config.to_dict())
    started = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NlmrWarning)
        HANDLERS[command](
            config,
            base_dir=config_path.parent,
            out_dir=out_dir,
            report=report,
            workers=workers or settings.workers,
            grid=grid,
        )
    for w in caught:
        if issubclass(w.category, NlmrWarning):
            report.add_warning(str(w.message))
    report.timing["total_seconds"] = time.perf_counter() - started

    report.write(out_dir / config.output.report)
    return report


# ============================================================================
# CLI
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlmr", description="Nonlinear Mendelian randomization")
    parser.add_argument("--version", action="version", version=f"nlmr {VERSION}")
    parser.add_argument("--log-level", choices=LOG_LEVELS, help="overrides NLMR_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("fit", "fit one estimator to a CSV dataset"),
        ("simulate", "run a Monte Carlo grid"),
        ("curve", "export the estimated causal curve"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="TOML analysis configuration")
        cmd.add_argument("--seed", type=int, help="overrides the configured seed")
        if name == "simulate":
            cmd.add_argument("--workers", type=int, help="worker processes (default NLMR_WORKERS)")
        if name == "curve":
            cmd.add_argument("--grid", help="lo:hi:steps evaluation grid")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    try:
        settings = RuntimeSettings.from_env()
    except NlmrError as e:
        logging.basicConfig(format="%(asctime)s - %(name)s - %(levelname)s - %(message)s", level=logging.INFO)
        logger.error(e.describe())
        return exit_code_for(e)

    logging.basicConfig(
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        level=getattr(logging, args.log_level or settings.log_level),
    )

    try:
        report = run(
            args.config,
            args.command,
            seed=args.seed,
            workers=getattr(args, "workers", None),
            grid=getattr(args, "grid", None),
            settings=settings,
        )
    except NlmrError as e:
        logger.error(e.describe())
        return exit_code_for(e)
    except Exception:
        logger.exception("unexpected failure")
        return exit_code_for(sys.exc_info()[1])

    logger.info(f"{args.command} finished with {len(report.warnings)} warning(s)")
    return exit_code_for(None)


if __name__ == "__main__":
    sys.exit(main())
