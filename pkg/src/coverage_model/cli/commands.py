# src/coverage_model/cli/commands.py
"""
Subcommands: preprocess, fit, predict, aggregate, waic, simulate.

Every stage reads the previous stage's CSV/JSON artifacts from disk, so any
stage can be re-run on its own. Exit codes: 0 ok, 1 user error, 2 internal error.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .. import __version__
from ..core import artifacts
from ..core.coverage_data import (
    merge_and_filter,
    parse_coverage_csv,
    parse_survey_csv,
    read_dataset_csv,
    read_denominators_csv,
    read_yovi_csv,
    write_dataset_csv,
)
from ..core.errors import CoverageModelError
from ..core.model import ModelKind, ObservationData
from ..core.posterior import (
    coverage_draws,
    coverage_estimates,
    coverage_from_mu,
    forecast_mean,
    predict_forward,
    regional_aggregate,
    waic,
)
from ..core.preprocess import clamp_and_logit, prepare_dataset, to_logit_data, yovi_filter
from ..core.sampler import run_chains
from ..models.configs import RunConfig, ScenarioSpec
from ..models.records import DEFAULT_VACCINES, ICDataset
from ..models.reports import EstimateTable, FitMetadata
from ..utils.logging_setup import configure_logging
from ..workflows.simulate import DESK_CHAIN, DESK_DIMS, FULL_BASE_YEARS, FULL_DIMS, desk_scenario, run_experiment
from .config_file import resolve_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2
POOLED_LABEL = "ALL"
PREDICTIONS_FILE = "predictions.csv"
WAIC_FILE = "waic.csv"


class UserError(CoverageModelError):
    """A usage problem detected after argument parsing."""


def _float_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=artifacts.FLOAT_FORMAT)
    return path


def _run_config(args: argparse.Namespace, overrides: Dict[str, object]) -> RunConfig:
    return resolve_run_config(getattr(args, "config", None), overrides)


# preprocess

def cmd_preprocess(args: argparse.Namespace) -> int:
    config = _run_config(args, {"min_sample_size": args.min_n})
    if not args.coverage and not args.survey:
        raise UserError("preprocess needs at least one --coverage or --survey file")
    sets: List[ICDataset] = [parse_coverage_csv(path, columns=config.columns) for path in args.coverage]
    sets += [parse_survey_csv(path, columns=config.columns) for path in args.survey]
    years = tuple(args.years) if args.years else None
    merged = merge_and_filter(sets, vaccines=args.vaccines, years=years, drop_zero=not args.keep_zero)
    prepared = prepare_dataset(merged, min_n=config.min_sample_size, ratio=not args.no_ratio)

    out = Path(args.out)
    write_dataset_csv(prepared, out)
    report = Path(args.report) if args.report else out.with_name(out.stem + "_report.txt")
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(prepared.report_text(), encoding="utf-8")
    print(f"wrote {len(prepared)} records to {out} and the processing report to {report}")
    return EXIT_OK


# fit

def _region_groups(dataset: ICDataset, pooled: bool, only: Optional[Sequence[str]]) -> Dict[str, ICDataset]:
    if pooled:
        return {POOLED_LABEL: dataset}
    groups: Dict[str, ICDataset] = {}
    for region in sorted({r.region for r in dataset.records}):
        if only and region not in only:
            continue
        groups[region] = ICDataset(records=[r for r in dataset.records if r.region == region],
                                   provenance_flags=dataset.provenance_flags)
    if not groups:
        raise UserError(f"no records for the requested regions {list(only or [])}")
    return groups


def fit_dataset(dataset: ICDataset, config: RunConfig, out: Path, regions: Optional[Sequence[str]] = None) -> List[Path]:
    """Fits the configured model per region (or pooled) and writes one fit directory each."""
    model = ModelKind(config.model)
    written = []
    for label, subset in _region_groups(dataset, config.pooled, regions).items():
        logit_data = to_logit_data(subset) if "clamped" in subset.provenance_flags else clamp_and_logit(subset)
        if not logit_data.observations:
            logger.warning(f"No observations for {label}; skipped")
            continue
        data = ObservationData.from_logit_data(logit_data)
        logger.info(f"Fitting {model.value.upper()} to {label}: {len(data)} observations, "
                    f"C={data.dims.C} V={data.dims.V} T={data.dims.T}")
        draws, report = run_chains(data, model, config.priors, config.chain)
        estimates = coverage_estimates(draws, logit_data.countries, logit_data.vaccines, logit_data.years,
                                       logit_data.ratio_map)
        meta = FitMetadata(
            model=model.value, label=label, countries=logit_data.countries, vaccines=logit_data.vaccines,
            years=logit_data.years, regions=logit_data.regions,
            ratio_map={k: list(v) for k, v in logit_data.ratio_map.items()},
            priors=config.priors, chain=config.chain, n_draws=draws.total, rhat_passed=report.passed,
            version=__version__,
        )
        written.append(artifacts.write_fit(out / label, meta, draws, report, estimates, data))
        if not report.passed:
            print(f"warning: R-hat gate failed for {label} (max R-hat {report.max_rhat:.3f}, "
                  f"{len(report.failing())} parameters at or above {report.rhat_threshold})", file=sys.stderr)
    return written


def cmd_fit(args: argparse.Namespace) -> int:
    config = _run_config(args, {
        "model": args.model,
        "pooled": "true" if args.pooled else None,
        "chain.n_chains": args.chains,
        "chain.iterations": args.iterations,
        "chain.warmup": args.warmup,
        "chain.thin": args.thin,
        "chain.seed": args.seed,
        "chain.blocking": args.blocking,
        "chain.n_workers": args.workers,
    })
    if args.restrict_sigma3 is False:
        priors = config.priors.model_copy(update={"sigma_src_scale": (*config.priors.sigma_src_scale[:2], 2.0),
                                                  "sigma3_upper": None})
        config = config.model_copy(update={"priors": priors})
    dataset = read_dataset_csv(args.data)
    written = fit_dataset(dataset, config, Path(args.out), regions=args.regions)
    print(f"wrote {len(written)} fit director{'y' if len(written) == 1 else 'ies'} under {args.out}")
    return EXIT_OK


# predict / aggregate / waic

def cmd_predict(args: argparse.Namespace) -> int:
    if args.steps < 1:
        raise UserError(f"--steps must be >= 1, got {args.steps}")
    yovi = read_yovi_csv(args.yovi) if args.yovi else None
    tables = []
    for directory in artifacts.find_fit_dirs(args.fit):
        meta, draws, _ = artifacts.load_fit(directory)
        fitted = artifacts.read_estimates(directory)
        forecast = predict_forward(draws, meta.countries, meta.vaccines, meta.years, args.steps,
                                   seed=args.seed, ratio_map=meta.ratio_map)
        combined = EstimateTable(rows=fitted.rows + forecast.rows)
        if yovi is not None:
            combined = yovi_filter(combined, yovi)
        _float_csv(combined.to_frame(), directory / PREDICTIONS_FILE)
        tables.append(combined.to_frame())
    if args.out:
        _float_csv(pd.concat(tables, ignore_index=True), Path(args.out))
    print(f"predicted {args.steps} year(s) ahead for {len(tables)} fit(s)")
    return EXIT_OK


def cmd_aggregate(args: argparse.Namespace) -> int:
    if not args.denominators:
        raise UserError("aggregate needs --denominators (target populations per country, vaccine and year)")
    denominators = read_denominators_csv(args.denominators)
    frames = []
    for directory in artifacts.find_fit_dirs(args.fit):
        meta, draws, _ = artifacts.load_fit(directory)
        p, labels = coverage_draws(draws, meta.vaccines, meta.ratio_map)
        frames.append(regional_aggregate(p, meta.countries, labels, meta.years, meta.regions, denominators).to_frame())
        if args.steps:
            mu = forecast_mean(draws, args.steps, np.random.default_rng(args.seed))
            future = [meta.years[-1] + s for s in range(1, args.steps + 1)]
            p_future, labels = coverage_from_mu(mu, meta.vaccines, meta.ratio_map)
            frames.append(regional_aggregate(p_future, meta.countries, labels, future, meta.regions, denominators,
                                             is_prediction=True).to_frame())
    table = pd.concat(frames, ignore_index=True)
    _float_csv(table, Path(args.out))
    print(f"wrote {len(table)} regional rows to {args.out}")
    return EXIT_OK


def cmd_waic(args: argparse.Namespace) -> int:
    rows = []
    for directory in artifacts.find_fit_dirs(args.fit):
        meta, draws, data = artifacts.load_fit(directory)
        report = waic(draws, data)
        row = {"fit": meta.label, "model": meta.model, **report.model_dump()}
        _float_csv(pd.DataFrame([row]), directory / WAIC_FILE)
        rows.append(row)
    table = pd.DataFrame(rows)
    if args.out:
        _float_csv(table, Path(args.out))
    print(table.to_string(index=False, float_format=lambda value: f"{value:.1f}"))
    return EXIT_OK


# simulate

def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = ScenarioSpec.near_noiseless() if args.scenario == "noiseless" else ScenarioSpec.numbered(int(args.scenario))
    if args.desk:
        scenario, base_years = desk_scenario(scenario, DESK_DIMS)
        dims, chain = DESK_DIMS, DESK_CHAIN
    else:
        dims, base_years, chain = FULL_DIMS, FULL_BASE_YEARS, None
    config = _run_config(args, {
        "chain.n_chains": args.chains,
        "chain.iterations": args.iterations,
        "chain.warmup": args.warmup,
        "chain.seed": args.chain_seed,
        "chain.n_workers": args.workers,
    })
    if chain is not None:
        explicit = {key: value for key, value in {
            "n_chains": args.chains, "iterations": args.iterations, "warmup": args.warmup,
        }.items() if value is not None}
        chain = chain.model_copy(update={**explicit, "seed": config.chain.seed, "n_workers": config.chain.n_workers})
    else:
        chain = config.chain
    if args.base_years is not None:
        base_years = args.base_years

    out = Path(args.out)
    for seed in args.seeds:
        report = run_experiment(scenario, dims, chain, base_years, seed=seed, mode=args.mode, n_jobs=args.jobs)
        stem = f"{scenario.name}_seed{seed}"
        frame = report.to_frame().rename_axis("metric").reset_index()
        _float_csv(frame, out / f"{stem}.csv")
        (out / f"{stem}.txt").write_text(report.to_text(), encoding="utf-8")
        print(report.to_text())
    return EXIT_OK


# parser

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value run configuration file (flags take precedence)")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")


def _add_chain_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--chains", type=int, default=None)
    parser.add_argument("--iterations", type=int, default=None)
    parser.add_argument("--warmup", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None, help="threads running chains")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coverage-model",
                                     description="Bayesian multi-source immunization coverage estimation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("preprocess", help="parse, adjust, select, ratio and clamp input data")
    _add_common(pre)
    pre.add_argument("--coverage", nargs="*", default=[], help="admin/official coverage CSV files")
    pre.add_argument("--survey", nargs="*", default=[], help="survey coverage CSV files")
    pre.add_argument("--out", required=True, help="analysis-ready dataset CSV")
    pre.add_argument("--report", default=None, help="processing report (default <out>_report.txt)")
    pre.add_argument("--vaccines", nargs="+", default=list(DEFAULT_VACCINES))
    pre.add_argument("--years", nargs=2, type=int, metavar=("FIRST", "LAST"), default=None)
    pre.add_argument("--min-n", type=int, default=None, help="survey sample size threshold")
    pre.add_argument("--no-ratio", action="store_true", help="keep DTP3 as observed instead of DTP3/DTP1")
    pre.add_argument("--keep-zero", action="store_true", help="keep records with 0%% coverage")
    pre.set_defaults(func=cmd_preprocess)

    fit = sub.add_parser("fit", help="run the MCMC sampler and write draws, diagnostics and estimates")
    _add_common(fit)
    _add_chain_flags(fit)
    fit.add_argument("--data", required=True, help="dataset CSV written by preprocess")
    fit.add_argument("--out", required=True, help="output directory (one subdirectory per fit)")
    fit.add_argument("--model", choices=["bdsl", "idml"], default=None)
    fit.add_argument("--pooled", action="store_true", help="one fit over every region")
    fit.add_argument("--regions", nargs="+", default=None, help="fit only these regions")
    fit.add_argument("--thin", type=int, default=None)
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--blocking", choices=["joint", "single"], default=None)
    fit.add_argument("--unrestricted-sigma3", dest="restrict_sigma3", action="store_false", default=True,
                     help="Half-Cauchy(0, 2) on every source scale, no truncation")
    fit.set_defaults(func=cmd_fit)

    pred = sub.add_parser("predict", help="forecast coverage beyond the fitted years")
    _add_common(pred)
    pred.add_argument("--fit", required=True, help="fit directory or a directory of fit directories")
    pred.add_argument("--steps", type=int, default=2)
    pred.add_argument("--seed", type=int, default=0)
    pred.add_argument("--yovi", default=None, help="year-of-introduction CSV")
    pred.add_argument("--out", default=None, help="combined CSV across fits")
    pred.set_defaults(func=cmd_predict)

    agg = sub.add_parser("aggregate", help="population-weighted regional coverage")
    _add_common(agg)
    agg.add_argument("--fit", required=True)
    agg.add_argument("--denominators", default=None, help="target population CSV (required)")
    agg.add_argument("--steps", type=int, default=0, help="also aggregate this many forecast years")
    agg.add_argument("--seed", type=int, default=0)
    agg.add_argument("--out", required=True)
    agg.set_defaults(func=cmd_aggregate)

    wa = sub.add_parser("waic", help="WAIC of every fit")
    _add_common(wa)
    wa.add_argument("--fit", required=True)
    wa.add_argument("--out", default=None)
    wa.set_defaults(func=cmd_waic)

    sim = sub.add_parser("simulate", help="simulation study comparing BDSL and IDML")
    _add_common(sim)
    _add_chain_flags(sim)
    sim.add_argument("--scenario", choices=["1", "2", "3", "noiseless"], default="1")
    sim.add_argument("--desk", action="store_true", help="C=8 V=3 T=12 with 4 x 1000 iterations")
    sim.add_argument("--seeds", nargs="+", type=int, default=[0])
    sim.add_argument("--mode", choices=["rolling", "extrapolate"], default="rolling")
    sim.add_argument("--base-years", type=int, default=None)
    sim.add_argument("--chain-seed", type=int, default=None)
    sim.add_argument("--jobs", type=int, default=1, help="fits run concurrently")
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    handler: Callable[[argparse.Namespace], int] = args.func
    try:
        return handler(args)
    except (CoverageModelError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER_ERROR
    except Exception as exc:
        logger.exception(f"Unexpected failure in '{args.command}'")
        print(f"error: internal failure: {exc}", file=sys.stderr)
        return EXIT_INTERNAL_ERROR
