import datetime
import logging
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from clickchoice.errors import InputError
from clickchoice.features import SamplesMeta
from clickchoice.tables import LatentClassModel

logger = logging.getLogger(__name__)

DEFAULT_TOP_N = (3, 5, 10)


def check_grid(model: LatentClassModel, samples: pd.DataFrame):
    if len(samples) == 0:
        return
    recency = int(samples["recency"].max())
    frequency = int(samples["frequency"].max())
    if recency > model.grid.recency_levels or frequency > model.grid.frequency_levels:
        raise InputError(
            f"Samples use levels up to {recency}x{frequency} but the model grid is {model.grid.describe()}"
        )
    if int(samples["recency"].min()) < 1 or int(samples["frequency"].min()) < 1:
        raise InputError("Sample levels must start at 1")


def check_samples_meta(model: LatentClassModel, meta: SamplesMeta):
    """Samples must come from the grid and features the model was fitted on."""
    if meta.grid != model.grid:
        raise InputError(
            f"Samples were built on a {meta.grid.describe()} grid but the model grid is {model.grid.describe()}"
        )
    for axis, built, fitted in (
        ("recency", meta.recency_feature, model.recency_feature),
        ("frequency", meta.frequency_feature, model.frequency_feature),
    ):
        if fitted is not None and built != fitted:
            raise InputError(f"Samples use {axis} feature {built!r} but the model was fitted on {fitted!r}")


def class_weights(model: LatentClassModel, categories: Iterable[str]) -> np.ndarray:
    """Posterior memberships for categories seen in training, class sizes for the rest."""
    lookup = {k: position for position, k in enumerate(model.categories)}
    rows = [model.memberships[lookup[k]] if k in lookup else model.pi for k in categories]
    return np.asarray(rows, dtype=float).reshape(-1, model.classes)


def score_pairs(model: LatentClassModel, samples: pd.DataFrame) -> pd.DataFrame:
    """Return the samples with a "score" column holding the estimated choice probability."""
    check_grid(model, samples)
    scored = samples.copy()
    if len(samples) == 0:
        scored["score"] = pd.Series(dtype=float)
        return scored

    values = model.stacked_values()
    cells = values[:, samples["recency"].to_numpy(dtype=np.int64) - 1, samples["frequency"].to_numpy(dtype=np.int64) - 1]
    weights = class_weights(model, samples["category_id"].astype(str))
    scored["score"] = np.einsum("ns,sn->n", weights, cells)
    unseen = set(samples["category_id"].astype(str)) - set(model.categories)
    if unseen:
        logger.info(f"Scoring {len(unseen)} categories unseen in training with class sizes")
    return scored


def rank_products(scored: pd.DataFrame) -> pd.DataFrame:
    """Order each customer's products by score, then view frequency, then product id."""
    ranked = scored.sort_values(
        ["customer_id", "score", "view_frequency", "product_id"],
        ascending=[True, False, False, True],
        kind="mergesort",
    ).reset_index(drop=True)
    ranked["rank"] = ranked.groupby("customer_id", sort=False).cumcount() + 1
    return ranked


def select_top_n(scored: pd.DataFrame, n: int) -> List[str]:
    """Top n products for a single customer's scored pairs."""
    if n < 1:
        raise ValueError(f"N must be at least 1, got {n}")
    ranked = scored.sort_values(["score", "view_frequency", "product_id"], ascending=[False, False, True], kind="mergesort")
    return ranked["product_id"].head(n).tolist()


def prf1(selected: Set[str], purchased: Set[str]) -> Optional[Tuple[float, float, float]]:
    """(recall, precision, f1), or None when nothing was purchased."""
    if not purchased:
        return None
    hits = len(set(selected) & set(purchased))
    recall = hits / len(purchased)
    precision = hits / len(selected) if selected else 0.0
    f1 = 2 * recall * precision / (recall + precision) if recall + precision > 0 else 0.0
    return recall, precision, f1


def average_precision(labels: Sequence[bool]) -> Optional[float]:
    is_relevant = np.asarray(labels, dtype=bool)
    if not is_relevant.any():
        return None
    precision_at_k = np.cumsum(is_relevant) / (1 + np.arange(len(is_relevant)))
    return float(precision_at_k[is_relevant].mean())


def mean_average_precision(rankings: Iterable[Sequence[bool]]) -> Optional[float]:
    scores = [ap for ap in (average_precision(labels) for labels in rankings) if ap is not None]
    return float(np.mean(scores)) if scores else None


@dataclass(frozen=True)
class BaseDateMetrics:
    base_date: datetime.date
    top_n: int
    customers: int
    recall: float
    precision: float
    f1: float
    map: float

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["base_date"] = self.base_date.isoformat()
        return values


@dataclass
class EvalReport:
    model: str
    classes: int
    top_n: Tuple[int, ...]
    per_base_date: List[BaseDateMetrics] = field(default_factory=list)
    flagged_dates: List[datetime.date] = field(default_factory=list)

    def overall(self, n: int) -> Dict[str, float]:
        rows = [row for row in self.per_base_date if row.top_n == n]
        if not rows:
            return {}
        return {metric: float(np.mean([getattr(row, metric) for row in rows])) for metric in ("recall", "precision", "f1", "map")}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "classes": self.classes,
            "top_n": list(self.top_n),
            "per_base_date": [row.to_dict() for row in self.per_base_date],
            "overall": {str(n): self.overall(n) for n in self.top_n},
            "flagged_dates": [d.isoformat() for d in self.flagged_dates],
        }


def group_by_base_date(samples: pd.DataFrame) -> List[Tuple[datetime.date, pd.DataFrame]]:
    return [(base_date, group.reset_index(drop=True)) for base_date, group in samples.groupby("base_date", sort=True)]


def evaluate_base_date(
    model: LatentClassModel, base_date: datetime.date, samples: pd.DataFrame, top_n: Sequence[int]
) -> List[BaseDateMetrics]:
    ranked = rank_products(score_pairs(model, samples))
    per_customer = {n: [] for n in top_n}
    rankings = []
    for _, products in ranked.groupby("customer_id", sort=True):
        purchased = set(products.loc[products["purchased"], "product_id"])
        if not purchased:
            continue
        rankings.append(products["purchased"].tolist())
        for n in top_n:
            per_customer[n].append(prf1(set(products["product_id"].head(n)), purchased))

    if not rankings:
        return []
    average_map = mean_average_precision(rankings)
    rows = []
    for n in top_n:
        recall, precision, f1 = np.mean(per_customer[n], axis=0)
        rows.append(
            BaseDateMetrics(base_date, n, len(rankings), float(recall), float(precision), float(f1), average_map)
        )
    return rows


def run_evaluation(
    model: LatentClassModel,
    groups: Sequence[Tuple[datetime.date, pd.DataFrame]],
    top_n: Sequence[int] = DEFAULT_TOP_N,
    executor: Optional[Executor] = None,
    progress: bool = False,
) -> EvalReport:
    if not groups:
        raise InputError("No test samples to evaluate")
    top_n = tuple(sorted(set(int(n) for n in top_n)))
    if top_n[0] < 1:
        raise ValueError(f"N must be at least 1, got {top_n[0]}")

    def evaluate(item):
        return evaluate_base_date(model, item[0], item[1], top_n)

    if executor is None:
        results = [evaluate(item) for item in tqdm(groups, desc="Evaluating", disable=not progress)]
    else:
        results = list(tqdm(executor.map(evaluate, groups), total=len(groups), desc="Evaluating", disable=not progress))

    report = EvalReport(model=model.kind, classes=model.classes, top_n=top_n)
    for (base_date, _), rows in zip(groups, results):
        if not rows:
            logger.warning(f"No customer purchased a viewed product on {base_date}; skipping it")
            report.flagged_dates.append(base_date)
        report.per_base_date.extend(rows)

    for n in top_n:
        overall = report.overall(n)
        if overall:
            logger.info(f"Top-{n}: F1 {overall['f1']:.4f}, MAP {overall['map']:.4f}")
    return report


def write_plot_series(entries: Sequence[Tuple[Dict[str, Any], EvalReport]], directory: Union[str, Path]):
    """Write f1.csv and map.csv series, one row per (labels, N) and per labels respectively.

    Each entry pairs labels such as {"model": "lcmcc", "classes": 4, "sample_rate": 0.1} with its report.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    f1_rows, map_rows = [], []
    for labels, report in entries:
        base = {"model": report.model, "classes": report.classes, "sample_rate": 1.0}
        base.update(labels)
        for n in report.top_n:
            overall = report.overall(n)
            if overall:
                f1_rows.append(dict(base, top_n=n, f1=overall["f1"]))
        if report.top_n and report.overall(report.top_n[0]):
            map_rows.append(dict(base, map=report.overall(report.top_n[0])["map"]))

    pd.DataFrame(f1_rows, columns=["model", "classes", "sample_rate", "top_n", "f1"]).to_csv(directory / "f1.csv", index=False)
    pd.DataFrame(map_rows, columns=["model", "classes", "sample_rate", "map"]).to_csv(directory / "map.csv", index=False)
    logger.info(f"Wrote plot series to {directory}")
