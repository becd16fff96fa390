import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy

from clickchoice import __version__
from clickchoice.em import EmConfig, em_fit, fit_per_category, fit_pooled
from clickchoice.errors import InputError, NumericalError
from clickchoice.evaluation import (
    DEFAULT_TOP_N,
    check_samples_meta,
    group_by_base_date,
    run_evaluation,
    write_plot_series,
)
from clickchoice.features import (
    FREQUENCY_FEATURES,
    RECENCY_FEATURES,
    FeatureConfig,
    SamplesMeta,
    aggregate_counts,
    build_samples,
    exclude_outlier_customers,
    parse_base_dates,
    read_events,
    read_samples,
    read_samples_meta,
    samples_meta_path,
    subsample,
    suggest_levels,
    write_events,
    write_samples,
    write_samples_meta,
)
from clickchoice.lclr import lclr_em_fit
from clickchoice.report import report_class_profiles
from clickchoice.solver import SolverConfig
from clickchoice.synth import ClickstreamProfile, generate_synthetic_clickstream
from clickchoice.tables import SCHEMA_VERSION, SHAPE_MCC, SHAPE_MONOTONE, CountTensor, LatentClassModel

logger = logging.getLogger(__name__)

LOG_ENV = "CLICKCHOICE_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2

MODELS = ("mono", "mcc", "mcc-k", "lcmcc", "lclr")

FEATURE_DEFAULTS = {
    "base_dates": None,
    "recency": FeatureConfig.DEFAULT_RECENCY_FEATURE,
    "frequency": FeatureConfig.DEFAULT_FREQUENCY_FEATURE,
    "recency_levels": None,
    "frequency_levels": None,
    "lookback_days": FeatureConfig.DEFAULT_LOOKBACK_DAYS,
    "label_horizon_days": FeatureConfig.DEFAULT_LABEL_HORIZON_DAYS,
    "session_gap_min": FeatureConfig.DEFAULT_SESSION_GAP_MINUTES,
    "outlier_frac": FeatureConfig.DEFAULT_OUTLIER_TOP_FRACTION,
    "sample_rate": 1.0,
    "seed": 0,
}

FIT_DEFAULTS = {
    "model": "lcmcc",
    "classes": 1,
    "restarts": EmConfig.DEFAULT_RESTARTS,
    "seed": EmConfig.DEFAULT_SEED,
    "max_iter": EmConfig.DEFAULT_MAX_EM_ITERATIONS,
    "loglik_rel_tol": EmConfig.DEFAULT_LOGLIK_REL_TOL,
    "epsilon": SolverConfig.DEFAULT_EPSILON,
    "pseudo_count": 0.0,
}

EVALUATE_DEFAULTS = {"top_n": ",".join(str(n) for n in DEFAULT_TOP_N), "sample_rate": None}

SIMULATE_DEFAULTS = {"seed": 0}


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def configure_logging() -> int:
    name = os.environ.get(LOG_ENV, "info").strip().lower()
    level = LOG_LEVELS.get(name, logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    if name not in LOG_LEVELS:
        logger.warning(f"Unknown {LOG_ENV} value {name!r}, using info")
    return level


def versions() -> Dict[str, str]:
    return {"clickchoice": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__}


def read_json(path: str) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        with open(path) as handle:
            data = json.load(handle)
    except json.JSONDecodeError as ex:
        raise InputError(f"{path}: invalid JSON ({ex})")
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a JSON object")
    return data


def write_json(path: str, data: Dict[str, Any]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        handle.write(json.dumps(data, sort_keys=True, indent=2) + "\n")


def load_artifact(path: str, cls):
    data = read_json(path)
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise InputError(f"{path}: unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
    try:
        return cls.from_dict(data)
    except (KeyError, TypeError) as ex:
        raise InputError(f"{path}: malformed {cls.__name__} ({ex!r})")


def resolve(args: argparse.Namespace, settings: Dict[str, Any], defaults: Dict[str, Any]) -> Dict[str, Any]:
    """Flags over config file over defaults."""
    resolved = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = settings.get(key, settings.get(key.replace("_", "-"), default))
        resolved[key] = value
    return resolved


def parse_top_n(spec: str) -> List[int]:
    try:
        values = [int(part) for part in str(spec).split(",") if part.strip()]
    except ValueError:
        raise InputError(f"Invalid --top-n value {spec!r}, expected comma separated integers")
    if not values or min(values) < 1:
        raise InputError(f"--top-n needs positive integers, got {spec!r}")
    return values


def run_simulate(args, settings: Dict[str, Any], executor, progress: bool) -> int:
    values = resolve(args, settings, SIMULATE_DEFAULTS)
    profile_values = dict(settings.get("profile", {}))
    if args.profile is not None:
        profile_values.update(read_json(args.profile))
    profile = ClickstreamProfile.from_dict(profile_values)
    seed = int(values["seed"])

    events, truth = generate_synthetic_clickstream(profile, seed)
    write_events(events, args.out)
    logger.info(f"Wrote {len(events)} events to {args.out}")
    if args.truth is not None:
        truth.update({"schema_version": SCHEMA_VERSION, "config": {"profile": profile.to_dict(), "seed": seed}})
        write_json(args.truth, truth)
    return EXIT_OK


def run_features(args, settings: Dict[str, Any], executor, progress: bool) -> int:
    values = resolve(args, settings, FEATURE_DEFAULTS)
    if values["base_dates"] is None:
        raise InputError("--base-dates is required (flag or config file)")
    config = FeatureConfig(
        recency_feature=values["recency"],
        frequency_feature=values["frequency"],
        recency_levels=values["recency_levels"],
        frequency_levels=values["frequency_levels"],
        lookback_days=int(values["lookback_days"]),
        label_horizon_days=int(values["label_horizon_days"]),
        session_gap_minutes=int(values["session_gap_min"]),
        outlier_top_fraction=float(values["outlier_frac"]),
    )
    base_dates = parse_base_dates(str(values["base_dates"]))
    resolved = dict(config.to_dict(), base_dates=str(values["base_dates"]), sample_rate=values["sample_rate"], seed=values["seed"])
    logger.info(f"Resolved feature config: {resolved}")

    events, _ = read_events(args.events)
    events = exclude_outlier_customers(events, config.outlier_top_fraction)
    samples = build_samples(events, base_dates, config, progress=progress)
    write_samples(samples, args.out)
    meta_path = write_samples_meta(args.out, SamplesMeta.from_config(config, resolved))
    logger.info(f"Wrote {len(samples)} samples to {args.out} (metadata in {meta_path})")

    if args.suggest_levels:
        recency_levels, frequency_levels = suggest_levels(samples)
        logger.info(f"Suggested grid: {recency_levels} recency levels x {frequency_levels} frequency levels")

    training = samples
    if float(values["sample_rate"]) < 1.0:
        training = subsample(samples, float(values["sample_rate"]), int(values["seed"]))
    categories = sorted(set(samples["category_id"].astype(str)))
    tensor = aggregate_counts(
        training, config.grid, categories, config.recency_feature, config.frequency_feature, config=resolved
    )
    tensor_path = args.tensor or str(Path(args.out).with_suffix("")) + ".tensor.json"
    write_json(tensor_path, tensor.to_dict())
    logger.info(f"Wrote {config.grid.describe()}x{len(categories)} count tensor to {tensor_path}")
    return EXIT_OK


def run_fit(args, settings: Dict[str, Any], executor, progress: bool) -> int:
    values = resolve(args, settings, FIT_DEFAULTS)
    kind = values["model"]
    if kind not in MODELS:
        raise InputError(f"Unknown model {kind!r}, expected one of {MODELS}")
    solver = SolverConfig(epsilon=float(values["epsilon"]), pseudo_count=float(values["pseudo_count"]))
    em_config = EmConfig(
        classes=int(values["classes"]),
        max_em_iterations=int(values["max_iter"]),
        loglik_rel_tol=float(values["loglik_rel_tol"]),
        restarts=int(values["restarts"]),
        seed=int(values["seed"]),
        solver=solver,
    )
    logger.info(f"Resolved fit config: {dict(em_config.to_dict(), model=kind)}")
    tensor = load_artifact(args.tensor, CountTensor)
    logger.info(f"Fitting {kind} on {tensor.grid.describe()} grid with {tensor.num_categories} categories")

    if kind == "mono":
        model = fit_pooled(tensor, SHAPE_MONOTONE, solver)
    elif kind == "mcc":
        model = fit_pooled(tensor, SHAPE_MCC, solver)
    elif kind == "mcc-k":
        model = fit_per_category(tensor, solver, executor)
    elif kind == "lcmcc":
        model = em_fit(tensor, em_config, executor)
    else:
        model = lclr_em_fit(tensor, em_config, executor)

    model = dataclasses.replace(model, config=dict(em_config.to_dict(), model=kind, tensor=tensor.config))
    write_json(args.out, model.to_dict())
    logger.info(f"Wrote {kind} model with {model.classes} classes to {args.out}")
    return EXIT_OK


def run_evaluate(args, settings: Dict[str, Any], executor, progress: bool) -> int:
    values = resolve(args, settings, EVALUATE_DEFAULTS)
    top_n = parse_top_n(values["top_n"])
    logger.info(f"Resolved evaluate config: {dict(values, top_n=sorted(set(top_n)))}")
    model = load_artifact(args.model, LatentClassModel)
    logger.info(f"Evaluating {model.kind} model with seed {model.config.get('seed')} on {model.grid.describe()} grid")
    meta = read_samples_meta(args.samples)
    if meta is None:
        logger.warning(f"No {samples_meta_path(args.samples)} next to the samples; checking their levels only")
    else:
        check_samples_meta(model, meta)
    samples = read_samples(args.samples)
    report = run_evaluation(model, group_by_base_date(samples), top_n, executor, progress)

    output = report.to_dict()
    output["schema_version"] = SCHEMA_VERSION
    output["config"] = {"top_n": sorted(set(top_n)), "model": model.config}
    write_json(args.out, output)
    logger.info(f"Wrote evaluation report to {args.out}")

    if args.emit_plots is not None:
        rate = values["sample_rate"]
        if rate is None:
            rate = model.config.get("tensor", {}).get("sample_rate", 1.0)
        write_plot_series([({"sample_rate": float(rate)}, report)], args.emit_plots)
    return EXIT_OK


def run_report(args, settings: Dict[str, Any], executor, progress: bool) -> int:
    model = load_artifact(args.model, LatentClassModel)
    tensor = load_artifact(args.tensor, CountTensor)
    profiles = report_class_profiles(model, tensor)
    output = {
        "schema_version": SCHEMA_VERSION,
        "model": model.kind,
        "classes": [profile.to_dict() for profile in profiles],
        "config": {"model": model.config},
    }
    if args.out is None:
        sys.stdout.write(json.dumps(output, sort_keys=True, indent=2) + "\n")
    else:
        write_json(args.out, output)
    return EXIT_OK


COMMANDS = {
    "simulate": run_simulate,
    "features": run_features,
    "fit": run_fit,
    "evaluate": run_evaluate,
    "report": run_report,
}


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="JSON file with one settings object per subcommand")
    common.add_argument("--threads", type=int, default=None, help="Worker threads (default: available cores)")

    parser = ArgumentParser(prog="clickchoice", description="Product-choice probability tables from clickstream data")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", parents=[common], help="Generate a synthetic event log")
    simulate.add_argument("--profile", type=str, help="JSON clickstream profile")
    simulate.add_argument("--seed", type=int)
    simulate.add_argument("--out", type=str, required=True, help="Event log (JSONL)")
    simulate.add_argument("--truth", type=str, help="Planted classes and tables (JSON)")

    features = commands.add_parser("features", parents=[common], help="Build labelled samples and a count tensor")
    features.add_argument("--events", type=str, required=True, help="Event log (JSONL or CSV)")
    features.add_argument("--base-dates", type=str, help="START..END or a comma separated list")
    features.add_argument("--recency", type=str, choices=RECENCY_FEATURES)
    features.add_argument("--frequency", type=str, choices=FREQUENCY_FEATURES)
    features.add_argument("--recency-levels", type=int)
    features.add_argument("--frequency-levels", type=int)
    features.add_argument("--lookback-days", type=int)
    features.add_argument("--label-horizon-days", type=int)
    features.add_argument("--session-gap-min", type=int)
    features.add_argument("--outlier-frac", type=float)
    features.add_argument("--sample-rate", type=float, help="Fraction of samples aggregated into the tensor")
    features.add_argument("--seed", type=int)
    features.add_argument("--out", type=str, required=True, help="Samples (JSONL)")
    features.add_argument("--tensor", type=str, help="Count tensor (JSON), next to --out by default")
    features.add_argument("--suggest-levels", action="store_true", help="Log grid sizes covering 95%% of pairs")

    fit = commands.add_parser("fit", parents=[common], help="Fit a probability-table model")
    fit.add_argument("--model", type=str, choices=MODELS)
    fit.add_argument("--tensor", type=str, required=True)
    fit.add_argument("--out", type=str, required=True)
    fit.add_argument("--classes", type=int)
    fit.add_argument("--restarts", type=int)
    fit.add_argument("--seed", type=int)
    fit.add_argument("--max-iter", type=int)
    fit.add_argument("--loglik-rel-tol", type=float)
    fit.add_argument("--epsilon", type=float)
    fit.add_argument("--pseudo-count", type=float)

    evaluate = commands.add_parser("evaluate", parents=[common], help="Top-N evaluation on labelled samples")
    evaluate.add_argument("--model", type=str, required=True)
    evaluate.add_argument("--samples", type=str, required=True)
    evaluate.add_argument("--top-n", type=str)
    evaluate.add_argument("--out", type=str, required=True)
    evaluate.add_argument("--emit-plots", type=str, help="Directory for f1.csv and map.csv")
    evaluate.add_argument("--sample-rate", type=float, help="Sampling-rate label for the plot series")

    report = commands.add_parser("report", parents=[common], help="Summarize latent classes")
    report.add_argument("--model", type=str, required=True)
    report.add_argument("--tensor", type=str, required=True)
    report.add_argument("--out", type=str)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = configure_logging()
    try:
        args = build_parser().parse_args(argv)
        logger.info(f"clickchoice {args.command}: versions {versions()}")
        settings = read_json(args.config).get(args.command, {}) if args.config else {}
        threads = args.threads if args.threads is not None else settings.get("threads", os.cpu_count() or 1)
        if int(threads) < 1:
            raise InputError(f"--threads must be at least 1, got {threads}")
        pool = ThreadPoolExecutor(max_workers=int(threads)) if int(threads) > 1 else contextlib.nullcontext()
        with pool as executor:
            return COMMANDS[args.command](args, settings, executor, level <= logging.INFO)
    except NumericalError as ex:
        logger.error(f"Numerical failure: {ex}")
        return EXIT_NUMERICAL
    except (InputError, FileNotFoundError, ValueError) as ex:
        logger.error(str(ex))
        return EXIT_INPUT
