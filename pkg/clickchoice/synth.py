"""Synthetic data with planted latent classes, and brute-force oracles for the solvers."""
import datetime
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from clickchoice.features import KIND_PURCHASE, KIND_VIEW, EVENT_COLUMNS, frequency_level, recency_level
from clickchoice.solver import SolverConfig, WeightedCellCounts, _log_likelihood
from clickchoice.tables import SHAPE_MCC, CountTensor, GridSpec, ProbabilityTable, check_shape_constraints, constraint_rows

logger = logging.getLogger(__name__)

ORACLE_MAX_CELLS = 4
DEFAULT_GAP = 0.15


def planted_tables(
    grid: GridSpec, classes: int, gap: float = DEFAULT_GAP, epsilon: float = SolverConfig.DEFAULT_EPSILON
) -> List[ProbabilityTable]:
    """MCC-feasible tables whose cells differ by at least gap between any two classes.

    Class s is c_s + A_s * u_i * v_j with u convex increasing in recency, v concave increasing in
    frequency, offsets spaced by more than gap and amplitudes non-decreasing in s.
    """
    if classes < 1:
        raise ValueError(f"Need at least one class, got {classes}")
    I, J = grid.shape
    offsets = 0.02 + np.arange(classes) * (gap + 0.02)
    headroom = 0.95 - offsets[-1]
    if headroom <= 0.0:
        raise ValueError(f"Cannot plant {classes} classes {gap} apart inside (0, 1)")
    amplitudes = 0.1 * np.arange(1, classes + 1)
    amplitudes *= min(1.0, headroom / amplitudes[-1])

    u = (np.arange(1, I + 1) / I) ** 2
    v = 1.0 - (1.0 - np.arange(1, J + 1) / (J + 1)) ** 2
    profile = u[:, None] * v[None, :]
    return [
        ProbabilityTable(grid=grid, values=np.clip(c + A * profile, epsilon, 1 - epsilon), epsilon=epsilon, shape=SHAPE_MCC)
        for c, A in zip(offsets, amplitudes)
    ]


@dataclass(frozen=True, eq=False)
class PlantedTruth:
    assignment: np.ndarray
    tables: Tuple[ProbabilityTable, ...]

    @property
    def pi(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=len(self.tables)) / len(self.assignment)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "assignment": [int(s) for s in self.assignment],
            "pi": self.pi.tolist(),
            "tables": [t.to_dict() for t in self.tables],
        }


def generate_planted_tensor(
    tables: Sequence[ProbabilityTable],
    assignment: Sequence[int],
    exposure: Union[int, np.ndarray],
    seed: int,
    categories: Optional[Sequence[str]] = None,
) -> Tuple[CountTensor, PlantedTruth]:
    if not tables:
        raise ValueError("At least one planted table is required")
    grid = tables[0].grid
    for s, table in enumerate(tables):
        if table.grid != grid:
            raise ValueError(f"Planted table {s} has grid {table.grid.describe()}, expected {grid.describe()}")
        violations = check_shape_constraints(table, SHAPE_MCC)
        if violations:
            raise ValueError(f"Planted table {s} is not MCC-feasible: {violations[0]}")

    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.min() < 0 or assignment.max() >= len(tables):
        raise ValueError(f"Assignments must lie in [0, {len(tables)})")
    K = len(assignment)
    if categories is None:
        categories = [f"c{k:03d}" for k in range(K)]

    n = np.broadcast_to(np.asarray(exposure, dtype=np.int64), grid.shape + (K,)).copy()
    x = np.stack([t.values for t in tables], axis=-1)[:, :, assignment]
    q = np.random.default_rng(seed).binomial(n, x)
    tensor = CountTensor(grid=grid, categories=tuple(categories), n=n, q=q)
    return tensor, PlantedTruth(assignment=assignment, tables=tuple(tables))


def oracle_lattice(step: float, epsilon: float) -> np.ndarray:
    inner = np.round(np.arange(1, int(round(1.0 / step))) * step, 10)
    return np.concatenate([[epsilon], inner[(inner > epsilon) & (inner < 1 - epsilon)], [1.0 - epsilon]])


def oracle_fit(
    counts: WeightedCellCounts, mode: str, step: float = 0.01, epsilon: float = SolverConfig.DEFAULT_EPSILON
) -> Tuple[ProbabilityTable, float]:
    """Best lattice table under the mode's constraints, by exhaustive enumeration."""
    grid = counts.grid
    if grid.cells > ORACLE_MAX_CELLS:
        raise ValueError(f"Oracle enumeration is limited to {ORACLE_MAX_CELLS} cells, got {grid.cells}")
    levels = oracle_lattice(step, epsilon)
    rows, _ = constraint_rows(grid, mode)
    rows = rows.toarray()
    a, b = counts.a.ravel(), counts.b.ravel()
    # per-cell objective at every lattice level, shape (cells, L)
    per_cell = a[:, None] * np.log(levels)[None, :] + b[:, None] * np.log1p(-levels)[None, :]

    best_value, best_x = -np.inf, None
    rest = grid.cells - 1
    if rest:
        grids = np.meshgrid(*([np.arange(len(levels))] * rest), indexing="ij")
        rest_idx = np.stack([g.ravel() for g in grids], axis=1)
    else:
        rest_idx = np.zeros((1, 0), dtype=np.int64)
    rest_values = levels[rest_idx]
    rest_objective = sum(per_cell[c + 1][rest_idx[:, c]] for c in range(rest)) if rest else np.zeros(1)

    for first in range(len(levels)):
        x = np.column_stack([np.full(len(rest_values), levels[first]), rest_values])
        objective = per_cell[0][first] + rest_objective
        if rows.shape[0]:
            objective = np.where(np.all(x @ rows.T >= -1e-12, axis=1), objective, -np.inf)
        winner = int(np.argmax(objective))
        if objective[winner] > best_value:
            best_value, best_x = float(objective[winner]), x[winner]

    table = ProbabilityTable(grid=grid, values=best_x.reshape(grid.shape), epsilon=epsilon, shape=mode)
    return table, _log_likelihood(table.values, counts.a, counts.b)


def pool_adjacent_violators(a: Sequence[float], b: Sequence[float], epsilon: float = SolverConfig.DEFAULT_EPSILON) -> np.ndarray:
    """Non-decreasing binomial MLE along a chain: weighted isotonic fit of a/(a+b) with weights a+b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    weights = a + b
    positive = np.flatnonzero(weights > 0)
    if len(positive) == 0:
        return np.full(len(a), 0.5)

    # blocks of (sum of a, total weight, number of points)
    blocks: List[List[float]] = []
    for idx in positive:
        blocks.append([a[idx], weights[idx], 1])
        while len(blocks) > 1 and blocks[-2][0] / blocks[-2][1] > blocks[-1][0] / blocks[-1][1]:
            last = blocks.pop()
            blocks[-1][0] += last[0]
            blocks[-1][1] += last[1]
            blocks[-1][2] += last[2]
    fitted = np.repeat([total / weight for total, weight, _ in blocks], [int(size) for _, _, size in blocks])

    # zero-weight points take the value of the closest weighted point on their left
    values = np.empty(len(a))
    values[positive] = fitted
    last = fitted[0]
    for idx in range(len(a)):
        if weights[idx] > 0:
            last = values[idx]
        else:
            values[idx] = last
    return np.clip(values, epsilon, 1.0 - epsilon)


@dataclass(frozen=True)
class ClickstreamProfile:
    DEFAULT_CUSTOMERS = 200
    DEFAULT_DAYS = 56

    customers: int = DEFAULT_CUSTOMERS
    categories: int = 8
    classes: int = 4
    products_per_category: int = 10
    interest_size: int = 12
    visit_prob: float = 0.25
    views_per_visit: float = 3.0
    start_date: str = "2015-09-01"
    days: int = DEFAULT_DAYS
    lookback_days: int = 28
    recency_levels: int = 24
    frequency_levels: int = 16
    gap: float = DEFAULT_GAP
    tables: Optional[List[List[List[float]]]] = None
    category_classes: Optional[Dict[str, int]] = None

    def __post_init__(self):
        if not 0.0 <= self.visit_prob <= 1.0:
            raise ValueError(f"visit_prob must lie in [0, 1], got {self.visit_prob}")
        if self.customers < 0 or self.categories < 1 or self.products_per_category < 1 or self.days < 1:
            raise ValueError("Profile sizes must be positive")
        if self.views_per_visit < 0.0:
            raise ValueError(f"views_per_visit must be nonnegative, got {self.views_per_visit}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.recency_levels, self.frequency_levels)

    def category_ids(self) -> List[str]:
        if self.category_classes is not None:
            return sorted(self.category_classes)
        return [f"cat{k:02d}" for k in range(self.categories)]

    def assignment(self) -> Dict[str, int]:
        if self.category_classes is not None:
            return dict(self.category_classes)
        return {k: position % self.classes for position, k in enumerate(self.category_ids())}

    def planted(self, epsilon: float = SolverConfig.DEFAULT_EPSILON) -> List[ProbabilityTable]:
        if self.tables is None:
            return planted_tables(self.grid, self.classes, self.gap, epsilon)
        return [ProbabilityTable(grid=self.grid, values=np.asarray(t), epsilon=epsilon, shape=SHAPE_MCC) for t in self.tables]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ClickstreamProfile":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


def generate_synthetic_clickstream(profile: ClickstreamProfile, seed: int) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """Daily views from a random interest pool per customer; purchases drawn from the planted
    DayR x ViewF table of the product's class, conditioned on the views before that day.
    """
    rng = np.random.default_rng(seed)
    tables = profile.planted()
    classes = profile.assignment()
    if max(classes.values()) >= len(tables):
        raise ValueError(f"Category classes refer to {max(classes.values()) + 1} tables, only {len(tables)} given")

    products = [(f"{k}-p{n:02d}", k) for k in profile.category_ids() for n in range(profile.products_per_category)]
    start = pd.Timestamp(profile.start_date).tz_localize("UTC")
    lookback = pd.Timedelta(days=profile.lookback_days)
    records = []

    for c in range(profile.customers):
        customer = f"u{c:05d}"
        pool = rng.choice(len(products), size=min(profile.interest_size, len(products)), replace=False)
        history: Dict[int, List[pd.Timestamp]] = {}
        for d in range(profile.days):
            day = start + pd.Timedelta(days=d)

            for p in sorted(history):
                recent = [t for t in history[p] if t >= day - lookback]
                if not recent:
                    continue
                i = recency_level((day - max(recent).floor("D")).days, profile.recency_levels)
                j = frequency_level(len(recent), profile.frequency_levels)
                product, category = products[p]
                if rng.random() < tables[classes[category]].at(i, j):
                    records.append((day + pd.Timedelta(hours=23), customer, product, category, KIND_PURCHASE))

            if rng.random() >= profile.visit_prob:
                continue
            views = rng.poisson(profile.views_per_visit)
            if views == 0:
                continue
            seconds = np.sort(rng.integers(8 * 3600, 20 * 3600, size=views))
            for offset, p in zip(seconds, rng.choice(pool, size=views)):
                stamp = day + pd.Timedelta(seconds=int(offset))
                history.setdefault(int(p), []).append(stamp)
                product, category = products[int(p)]
                records.append((stamp, customer, product, category, KIND_VIEW))

    events = pd.DataFrame(records, columns=EVENT_COLUMNS)
    if len(events):
        events = events.sort_values(["timestamp", "customer_id", "product_id", "kind"], kind="mergesort").reset_index(drop=True)
    else:
        events["timestamp"] = pd.Series(dtype="datetime64[ns, UTC]")
    logger.info(
        f"Simulated {int((events['kind'] == KIND_VIEW).sum())} views and "
        f"{int((events['kind'] == KIND_PURCHASE).sum())} purchases for {profile.customers} customers"
    )
    truth = {
        "category_classes": classes,
        "tables": [t.to_dict() for t in tables],
        "profile": profile.to_dict(),
        "seed": seed,
    }
    return events, truth


def day_range(profile: ClickstreamProfile) -> List[datetime.date]:
    start = datetime.date.fromisoformat(profile.start_date)
    return [start + datetime.timedelta(days=d) for d in range(profile.days)]
