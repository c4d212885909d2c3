"""
Command-line entry point.

    python -m pooled_corr analyze --builtin molloy2014 --filter design=prospective
    python -m pooled_corr simulate --grid molloy --reps 2000 --threads 4
    python -m pooled_corr datasets show santos2016
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from typing import Dict, Iterator, List, Optional, Sequence, TextIO

from pydantic import ValidationError

from .ci_methods import apply_bias_correction, compute_cis, ipd_ci
from .config import settings
from .datasets import builtin, export_csv, filter_dataset, list_builtins, load_csv
from .errors import InvalidInputError, PooledCorrError
from .pooling import summarize
from .report import ANALYSIS_COLUMNS, SIMULATION_COLUMNS, ReportWriter, ci_row, skipped_row
from .schemas import Backtransform, BootstrapSpec, CiMethod, CiOptions, Dataset, RunConfig, SimModel
from .simulation import (
    GRID_RHOS,
    GRID_TAUS,
    aggregate_results,
    default_grid,
    iter_grid,
    k1_grid,
    load_grid,
    molloy_replica_scenarios,
)
from .stats_core import truncnorm_bias_grid

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
DATASET_LIST_COLUMNS = ["name", "k", "n_total", "description"]


def _parse_methods(text: str) -> tuple:
    out = []
    for token in text.split(","):
        token = token.strip().upper()
        if not token:
            continue
        try:
            out.append(CiMethod(token))
        except ValueError:
            raise InvalidInputError(f"unknown method {token!r}; choose from {', '.join(m.value for m in CiMethod)}")
    return tuple(out)


def _parse_filters(items: Optional[List[str]]) -> Dict[str, str]:
    filters: Dict[str, str] = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise InvalidInputError(f"--filter expects key=value, got {item!r}")
        filters[key.strip()] = value.strip()
    return filters


def _parse_threads(text: str) -> int:
    if text == "auto":
        return -1
    try:
        threads = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"threads must be an integer or 'auto', got {text!r}")
    if threads < 1:
        raise argparse.ArgumentTypeError("threads must be at least 1")
    return threads


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--alpha", type=float, default=0.05, help="1 - confidence level (default 0.05)")
    common.add_argument("--methods", default=",".join(m.value for m in CiMethod),
                        help="comma separated CI methods (default: all eight)")
    common.add_argument("--backtransform", choices=["tanh", "integral"],
                        help="override the z-to-r back-transform of the z-scale methods")
    common.add_argument("--bootstrap-reps", type=int, default=settings.bootstrap_reps)
    common.add_argument("--seed", type=int, default=settings.seed)
    common.add_argument("--threads", type=_parse_threads, default=settings.threads,
                        help="worker count or 'auto'")
    common.add_argument("--clamp", type=float, default=settings.clamp_bound,
                        help="|r| bound applied before the Fisher transform")
    common.add_argument("--bias-correct", action="store_true",
                        help="correct each observed r for its small-sample bias before pooling")
    common.add_argument("--output", help="write the report here instead of stdout")
    common.add_argument("--format", choices=["csv", "json"], default="csv", dest="output_format")
    common.add_argument("--log-level", default=settings.log_level)

    parser = argparse.ArgumentParser(prog="pooled_corr",
                                     description="Confidence intervals for pooled correlations")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    analyze = sub.add_parser("analyze", parents=[common], help="meta-analyse one dataset")
    source = analyze.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help="study-summary CSV with r and n columns")
    source.add_argument("--builtin", help="name of a shipped dataset")
    analyze.add_argument("--filter", action="append", metavar="KEY=VALUE",
                         help="keep studies whose attribute matches; repeatable")
    analyze.add_argument("--fixed-effect", action="store_true",
                         help="also report fixed-effect intervals and the pooled-data interval")

    simulate = sub.add_parser("simulate", parents=[common], help="run a coverage simulation grid")
    simulate.add_argument("--grid", default="default", help="default, k1, molloy or a grid CSV path")
    simulate.add_argument("--reps", type=int, default=settings.sim_reps)
    simulate.add_argument("--z-draw", action="store_true",
                          help="draw observed correlations on the z-scale instead of from raw samples")
    simulate.add_argument("--lognormal-copula", action="store_true",
                          help="induce lognormal dependence through a calibrated Gaussian copula "
                               "instead of mixing iid lognormals")
    simulate.add_argument("--bias-grid", action="store_true",
                          help="print the truncated-normal mean-shift table and exit")

    datasets = sub.add_parser("datasets", help="list or show the shipped datasets")
    datasets.add_argument("action", choices=["list", "show"])
    datasets.add_argument("name", nargs="?")
    datasets.add_argument("--output")
    datasets.add_argument("--format", choices=["csv", "json"], default="csv", dest="output_format")
    datasets.add_argument("--log-level", default=settings.log_level)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.subcommand == "datasets":
        values = {"subcommand": "datasets", "output_format": args.output_format, "source": args.name}
    else:
        values = {
            "subcommand": args.subcommand,
            "alpha": args.alpha,
            "methods": _parse_methods(args.methods),
            "backtransform": Backtransform(args.backtransform.upper()) if args.backtransform else None,
            "bootstrap_reps": args.bootstrap_reps,
            "seed": args.seed,
            "output_format": args.output_format,
            "threads": args.threads,
            "bias_correct": args.bias_correct,
            "clamp_bound": args.clamp,
        }
        if args.subcommand == "analyze":
            values["fixed_effect"] = args.fixed_effect
            values["source"] = args.input or args.builtin
            values["filters"] = _parse_filters(args.filter)
        else:
            values["reps"] = args.reps
            values["within_study"] = "z" if args.z_draw else "raw"
            values["lognormal_dependence"] = "copula" if args.lognormal_copula else "mixing"
            values["source"] = args.grid
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise InvalidInputError(f"invalid configuration: {e}") from e


@contextlib.contextmanager
def _open_output(path: Optional[str]) -> Iterator[TextIO]:
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            yield handle


def _load_source(config: RunConfig, from_builtin: bool) -> Dataset:
    dataset = builtin(config.source) if from_builtin else load_csv(config.source)
    for key, value in config.filters.items():
        dataset = filter_dataset(dataset, key, value)
    return dataset


def _bootstrap(config: RunConfig) -> BootstrapSpec:
    return BootstrapSpec(reps=config.bootstrap_reps, rng_seed=config.seed)


def cmd_analyze(config: RunConfig, dataset: Dataset, stream: TextIO) -> int:
    options = CiOptions(
        backtransform=config.backtransform,
        bootstrap=_bootstrap(config),
        clamp_bound=config.clamp_bound,
    )
    studies = dataset.studies()
    if config.bias_correct:
        studies = apply_bias_correction(studies, config.clamp_bound)
    summary = summarize(studies, config.clamp_bound, options.quadrature)
    logger.info(f"{dataset.name}: K={summary.k}, N={summary.n_total}, tau2_SJ={summary.tau2:.4f}")

    writer = ReportWriter(stream, config.output_format, config, ANALYSIS_COLUMNS,
                          meta={"dataset": dataset.name, "summary": summary.to_dict()})
    passes = [("random", options, summary.tau2)]
    if config.fixed_effect:
        passes.append(("fixed", options.model_copy(update={"fixed_effect": True}), 0.0))

    for effects, opts, tau2 in passes:
        results, skipped = compute_cis(studies, config.methods, config.alpha, opts)
        for method in config.methods:
            if method in results:
                writer.write_row(ci_row(dataset.name, effects, results[method], method.value,
                                        summary.k, summary.n_total, tau2))
            else:
                logger.warning(f"{method.value} skipped ({effects} effects): {skipped[method]}")
                writer.write_row(skipped_row(dataset.name, effects, method.value, summary.k,
                                             summary.n_total, tau2, config.alpha, skipped[method]))
    if config.fixed_effect:
        ipd = ipd_ci(studies, config.alpha)
        writer.write_row(ci_row(dataset.name, "fixed", ipd, "IPD", summary.k, summary.n_total, 0.0))
    writer.close()
    return 0


def _scenarios(config: RunConfig):
    bootstrap = _bootstrap(config)
    overrides = {
        "within_study": config.within_study,
        "bias_correct": config.bias_correct,
        "backtransform": config.backtransform,
        "lognormal_dependence": config.lognormal_dependence,
    }
    if config.source == "default":
        return default_grid(config.seed, config.reps, config.methods, bootstrap, **overrides)
    if config.source == "k1":
        return k1_grid(config.seed, config.reps, lognormal_dependence=config.lognormal_dependence)
    if config.source == "molloy":
        return molloy_replica_scenarios(config.seed, config.reps, config.methods, bootstrap, **overrides)
    return load_grid(config.source, config.methods, bootstrap, **overrides)


def cmd_simulate(config: RunConfig, stream: TextIO) -> int:
    scenarios = _scenarios(config)
    meta = {"cells": len(scenarios)}
    if any(s.model is SimModel.LOGNORMAL_K1 and s.lognormal_dependence == "copula" for s in scenarios):
        note = "lognormal dependence induced through a calibrated Gaussian copula"
        logger.warning(f"deviation risk: {note}")
        meta["notes"] = note
    writer = ReportWriter(stream, config.output_format, config, SIMULATION_COLUMNS, meta=meta)

    finished = []
    for s, result, error in iter_grid(scenarios, config.threads):
        if result is None:
            writer.write_row({"level": "cell", "scenario_id": s.scenario_id, "model": s.model.value,
                              "rho": s.rho, "tau": s.tau, "k": s.k, "n_pattern": s.n_pattern,
                              "error": error})
            continue
        logger.info(f"finished {s.scenario_id}")
        writer.write_rows([{"level": "cell", **row} for row in result.rows()])
        finished.append(result)

    for row in aggregate_results(finished).to_dict("records"):
        writer.write_row({"level": "aggregate", "n_pattern": "all", **row})
    writer.close()
    return 0


def cmd_bias_grid(config: RunConfig, stream: TextIO) -> int:
    frame = truncnorm_bias_grid(GRID_RHOS, [t for t in GRID_TAUS if t > 0])
    writer = ReportWriter(stream, config.output_format, config, list(frame.columns))
    writer.write_rows(frame.to_dict("records"))
    writer.close()
    return 0


def cmd_datasets(config: RunConfig, action: str, name: Optional[str], stream: TextIO) -> int:
    """List the built-ins, or print one of them.

    ``show`` writes the dataset exactly as ``load_csv`` reads it, so it carries
    no provenance header.
    """
    if action == "list":
        writer = ReportWriter(stream, config.output_format, config, DATASET_LIST_COLUMNS)
        writer.write_rows([dict(zip(DATASET_LIST_COLUMNS, entry)) for entry in list_builtins()])
        writer.close()
        return 0
    if not name:
        raise InvalidInputError("datasets show needs a dataset name")
    dataset = builtin(name)
    if config.output_format == "json":
        stream.write(dataset.model_dump_json(indent=2) + "\n")
    else:
        stream.write(export_csv(dataset))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=str(args.log_level).upper(), format=LOG_FORMAT, stream=sys.stderr)

    try:
        config = resolve_config(args)
        with _open_output(args.output) as stream:
            if config.subcommand == "datasets":
                return cmd_datasets(config, args.action, args.name, stream)
            if config.subcommand == "analyze":
                dataset = _load_source(config, from_builtin=args.builtin is not None)
                return cmd_analyze(config, dataset, stream)
            if args.bias_grid:
                return cmd_bias_grid(config, stream)
            return cmd_simulate(config, stream)
    except PooledCorrError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception("Unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
