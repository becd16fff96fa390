import logging
from concurrent.futures import ThreadPoolExecutor

import pandas as pd

from clickchoice.em import EmConfig, em_fit, fit_per_category, fit_pooled
from clickchoice.evaluation import group_by_base_date, run_evaluation, write_plot_series
from clickchoice.features import FeatureConfig, aggregate_counts, build_samples, subsample
from clickchoice.lclr import lclr_em_fit
from clickchoice.solver import SolverConfig
from clickchoice.synth import ClickstreamProfile, day_range, generate_synthetic_clickstream
from clickchoice.tables import SHAPE_MCC

logger = logging.getLogger(__name__)


def fit_models(tensor, classes, restarts, seed, executor):
    solver = SolverConfig()
    config = EmConfig(classes=classes, restarts=restarts, seed=seed, solver=solver)
    yield "mcc", fit_pooled(tensor, SHAPE_MCC, solver)
    yield "mcc-k", fit_per_category(tensor, solver, executor)
    yield "lcmcc", em_fit(tensor, config, executor)
    yield "lclr", lclr_em_fit(tensor, config, executor)


def main(args):

    profile = ClickstreamProfile(customers=args.customers, days=args.train_days + args.test_days, classes=args.classes)
    events, _ = generate_synthetic_clickstream(profile, args.seed)
    print(f"Simulated {len(events)} events for {profile.customers} customers")

    dates = day_range(profile)
    warmup = FeatureConfig.DEFAULT_LOOKBACK_DAYS // 2
    train_dates = dates[warmup : args.train_days]
    test_dates = dates[args.train_days :]

    features = FeatureConfig(recency_feature="dayr", frequency_feature="viewf")
    train = build_samples(events, train_dates, features, progress=True)
    test = build_samples(events, test_dates, features, progress=True)
    categories = profile.category_ids()
    groups = group_by_base_date(test)

    entries = []
    with ThreadPoolExecutor(max_workers=args.threads) as executor:
        for rate in args.sample_rates:
            sampled = subsample(train, rate, args.seed) if rate < 1.0 else train
            tensor = aggregate_counts(sampled, features.grid, categories, "dayr", "viewf")
            print(f"Sampling rate {rate}: {len(sampled)} training samples")

            for name, model in fit_models(tensor, args.classes, args.restarts, args.seed, executor):
                report = run_evaluation(model, groups, args.top_n)
                entries.append(({"model": name, "sample_rate": rate}, report))
                scores = ", ".join(f"F1@{n} {report.overall(n)['f1']:.4f}" for n in report.top_n)
                print(f"  {name:<6} ({model.classes} classes): {scores}, MAP {report.overall(report.top_n[0])['map']:.4f}")

    if args.plots is not None:
        write_plot_series(entries, args.plots)
        print(f"Plot series written to {args.plots}")

    summary = pd.DataFrame(
        [dict(labels, classes=report.classes, f1=report.overall(args.top_n[0])["f1"]) for labels, report in entries]
    )
    print(summary.pivot_table(index="model", columns="sample_rate", values="f1").to_string())


if __name__ == "__main__":

    import argparse

    parser = argparse.ArgumentParser()

    parser.add_argument("--customers", type=int, default=300)

    parser.add_argument("--classes", type=int, default=4)

    parser.add_argument("--train_days", type=int, default=42)

    parser.add_argument("--test_days", type=int, default=14)

    parser.add_argument("--restarts", type=int, default=EmConfig.DEFAULT_RESTARTS)

    parser.add_argument(
        "--sample_rates",
        type=lambda spec: [float(value) for value in spec.split(",")],
        default=[0.1, 1.0],
        help="Comma separated training sampling rates",
    )

    parser.add_argument(
        "--top_n",
        type=lambda spec: [int(value) for value in spec.split(",")],
        default=[3, 5, 10],
    )

    parser.add_argument("--threads", type=int, default=4)

    parser.add_argument("--seed", type=int, default=0)

    parser.add_argument("--plots", type=str, help="Directory for f1.csv and map.csv")

    logging.basicConfig(level=logging.WARNING)

    main(parser.parse_args())
