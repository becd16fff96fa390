import datetime
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from clickchoice.errors import InputError
from clickchoice.tables import SCHEMA_VERSION, CountTensor, GridSpec

logger = logging.getLogger(__name__)

KIND_VIEW = "view"
KIND_PURCHASE = "purchase"
EVENT_KINDS = (KIND_VIEW, KIND_PURCHASE)

RECENCY_FEATURES = ("viewr", "sesr", "dayr")
FREQUENCY_FEATURES = ("viewf", "sesf", "dayf")
DEFAULT_LEVELS = {"viewr": 24, "sesr": 12, "dayr": 24, "viewf": 16, "sesf": 8, "dayf": 8}
DISPLAY_NAMES = {"viewr": "ViewR", "sesr": "SesR", "dayr": "DayR", "viewf": "ViewF", "sesf": "SesF", "dayf": "DayF"}

EVENT_COLUMNS = ["timestamp", "customer_id", "product_id", "category_id", "kind"]
SAMPLE_COLUMNS = [
    "base_date",
    "customer_id",
    "product_id",
    "category_id",
    "recency",
    "frequency",
    "purchased",
    "recency_units",
    "frequency_units",
    "view_frequency",
]

_MALFORMED = "\x00malformed"


@dataclass(frozen=True)
class ClickEvent:
    timestamp: pd.Timestamp
    customer_id: str
    product_id: str
    category_id: str
    kind: str

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"Event kind must be one of {EVENT_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "timestamp", _to_utc(self.timestamp))


def _to_utc(value) -> pd.Timestamp:
    stamp = pd.Timestamp(value)
    return stamp.tz_localize("UTC") if stamp.tzinfo is None else stamp.tz_convert("UTC")


@dataclass(frozen=True)
class FeatureConfig:
    DEFAULT_RECENCY_FEATURE = "dayr"
    DEFAULT_FREQUENCY_FEATURE = "viewf"
    DEFAULT_LOOKBACK_DAYS = 28
    DEFAULT_LABEL_HORIZON_DAYS = 1
    DEFAULT_SESSION_GAP_MINUTES = 30
    DEFAULT_OUTLIER_TOP_FRACTION = 0.01

    recency_feature: str = DEFAULT_RECENCY_FEATURE
    frequency_feature: str = DEFAULT_FREQUENCY_FEATURE
    recency_levels: Optional[int] = None
    frequency_levels: Optional[int] = None
    lookback_days: int = DEFAULT_LOOKBACK_DAYS
    label_horizon_days: int = DEFAULT_LABEL_HORIZON_DAYS
    session_gap_minutes: int = DEFAULT_SESSION_GAP_MINUTES
    outlier_top_fraction: float = DEFAULT_OUTLIER_TOP_FRACTION

    def __post_init__(self):
        object.__setattr__(self, "recency_feature", self.recency_feature.lower())
        object.__setattr__(self, "frequency_feature", self.frequency_feature.lower())
        if self.recency_feature not in RECENCY_FEATURES:
            raise ValueError(f"Unknown recency feature {self.recency_feature!r}, expected one of {RECENCY_FEATURES}")
        if self.frequency_feature not in FREQUENCY_FEATURES:
            raise ValueError(
                f"Unknown frequency feature {self.frequency_feature!r}, expected one of {FREQUENCY_FEATURES}"
            )
        if self.recency_levels is None:
            object.__setattr__(self, "recency_levels", DEFAULT_LEVELS[self.recency_feature])
        if self.frequency_levels is None:
            object.__setattr__(self, "frequency_levels", DEFAULT_LEVELS[self.frequency_feature])
        if self.lookback_days < 1 or self.label_horizon_days < 1 or self.session_gap_minutes < 1:
            raise ValueError("Lookback, label horizon and session gap must all be positive")
        if not 0.0 <= self.outlier_top_fraction < 1.0:
            raise ValueError(f"outlier_top_fraction must lie in [0, 1), got {self.outlier_top_fraction}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.recency_levels, self.frequency_levels)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FeatureConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Sample:
    base_date: datetime.date
    customer_id: str
    product_id: str
    category_id: str
    recency: int
    frequency: int
    purchased: bool
    recency_units: int = 0
    frequency_units: int = 0
    view_frequency: int = 0


@dataclass
class IngestSummary:
    records: int = 0
    accepted: int = 0
    malformed: int = 0
    reasons: Dict[str, int] = field(default_factory=dict)

    def skip(self, reason: str):
        self.malformed += 1
        self.reasons[reason] = self.reasons.get(reason, 0) + 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def recency_level(m: int, levels: int) -> int:
    if m < 1:
        raise ValueError(f"Elapsed units must be at least 1, got {m}")
    return max(levels + 1 - m, 1)


def frequency_level(n: int, levels: int) -> int:
    if n < 1:
        raise ValueError(f"Counts must be at least 1, got {n}")
    return min(n, levels)


def count_sessions(times: Sequence, gap_minutes: int) -> int:
    """1 + number of gaps longer than gap_minutes between consecutive sorted times."""
    if len(times) == 0:
        return 0
    stamps = pd.Series(pd.to_datetime(list(times), utc=True)).sort_values()
    return 1 + int((stamps.diff() > pd.Timedelta(minutes=gap_minutes)).sum())


# helper function
def events_frame(events: Union[pd.DataFrame, Iterable[ClickEvent]]) -> pd.DataFrame:
    if isinstance(events, pd.DataFrame):
        frame = events.loc[:, EVENT_COLUMNS].copy()
    else:
        frame = pd.DataFrame([asdict(e) for e in events], columns=EVENT_COLUMNS)
    frame["timestamp"] = pd.to_datetime(frame["timestamp"], utc=True)
    for column in ("customer_id", "product_id", "category_id", "kind"):
        frame[column] = frame[column].astype(str)
    return frame.sort_values(["timestamp", "customer_id", "product_id", "kind"], kind="mergesort").reset_index(drop=True)


def _parse_timestamps(raw: pd.Series, lines: pd.Series, path: Union[str, Path]) -> pd.Series:
    raw = raw.astype(str).str.strip()
    epoch = raw.str.fullmatch(r"-?\d+")
    parsed = pd.Series(pd.NaT, index=raw.index, dtype="datetime64[ns, UTC]")
    if epoch.any():
        parsed[epoch] = pd.to_datetime(raw[epoch].astype(np.int64), unit="s", utc=True)
    if (~epoch).any():
        parsed[~epoch] = pd.to_datetime(raw[~epoch], utc=True, errors="coerce", format="ISO8601")
    bad = parsed.isna()
    if bad.any():
        first = bad.idxmax()
        raise InputError(f"{path}:{int(lines[first])}: unparseable timestamp {raw[first]!r}")
    return parsed


def read_events(path: Union[str, Path]) -> Tuple[pd.DataFrame, IngestSummary]:
    """Read a JSONL or CSV event log; malformed records are counted and skipped."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Event log not found: {path}")

    summary = IngestSummary()
    if path.suffix.lower() == ".csv":
        raw = pd.read_csv(
            path,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
            engine="python",
            on_bad_lines=lambda fields: [_MALFORMED] + [""] * (len(EVENT_COLUMNS) - 1),
        )
        missing = [c for c in EVENT_COLUMNS if c not in raw.columns]
        if missing:
            raise InputError(f"{path}: header is missing columns {missing}")
        raw = raw.loc[:, EVENT_COLUMNS]
        raw["line"] = np.arange(len(raw)) + 2
    else:
        records: List[Dict[str, Any]] = []
        with open(path) as handle:
            for line_number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    record = None
                if not isinstance(record, dict):
                    record = {"timestamp": _MALFORMED}
                record = {c: record.get(c, "") for c in EVENT_COLUMNS}
                record["line"] = line_number
                records.append(record)
        raw = pd.DataFrame(records, columns=EVENT_COLUMNS + ["line"])

    summary.records = len(raw)
    keep = np.ones(len(raw), dtype=bool)
    for position, row in enumerate(raw.itertuples(index=False)):
        if row.timestamp == _MALFORMED:
            summary.skip("unparseable record")
            keep[position] = False
        elif any(str(getattr(row, c)).strip() in ("", "None", "nan") for c in EVENT_COLUMNS):
            summary.skip("missing field")
            keep[position] = False
        elif str(row.kind).strip().lower() not in EVENT_KINDS:
            summary.skip("unknown kind")
            keep[position] = False

    raw = raw[keep].reset_index(drop=True)
    frame = pd.DataFrame(
        {
            "timestamp": _parse_timestamps(raw["timestamp"], raw["line"], path),
            "customer_id": raw["customer_id"].astype(str).str.strip(),
            "product_id": raw["product_id"].astype(str).str.strip(),
            "category_id": raw["category_id"].astype(str).str.strip(),
            "kind": raw["kind"].astype(str).str.strip().str.lower(),
        }
    )
    summary.accepted = len(frame)
    if summary.malformed:
        logger.warning(f"Skipped {summary.malformed} malformed records in {path}: {summary.reasons}")
    logger.info(f"Read {summary.accepted} events from {path}")
    return events_frame(frame), summary


def write_events(events: Union[pd.DataFrame, Iterable[ClickEvent]], path: Union[str, Path]):
    frame = events_frame(events)
    with open(path, "w") as handle:
        for row in frame.itertuples(index=False):
            record = {
                "timestamp": row.timestamp.strftime("%Y-%m-%dT%H:%M:%SZ"),
                "customer_id": row.customer_id,
                "product_id": row.product_id,
                "category_id": row.category_id,
                "kind": row.kind,
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def exclude_outlier_customers(events: pd.DataFrame, fraction: float) -> pd.DataFrame:
    """Drop every event of the top ceil(fraction * customers) customers by purchase count.

    Ties at the cutoff go to the lexicographically larger customer id.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"Outlier fraction must lie in [0, 1), got {fraction}")
    customers = pd.Index(events["customer_id"].unique())
    excluded_count = math.ceil(fraction * len(customers))
    if excluded_count == 0:
        return events

    purchases = (
        events.loc[events["kind"] == KIND_PURCHASE, "customer_id"].value_counts().reindex(customers, fill_value=0)
    )
    ranking = pd.DataFrame({"customer_id": customers, "purchases": purchases.to_numpy()})
    ranking = ranking.sort_values(["purchases", "customer_id"], ascending=[False, False], kind="mergesort")
    excluded = set(ranking["customer_id"].iloc[:excluded_count])
    logger.info(f"Excluding {len(excluded)} of {len(customers)} customers as purchase outliers")
    return events[~events["customer_id"].isin(excluded)].reset_index(drop=True)


def _base_timestamp(base_date: datetime.date) -> pd.Timestamp:
    return pd.Timestamp(base_date).tz_localize("UTC")


def assign_sessions(views: pd.DataFrame, gap_minutes: int) -> pd.Series:
    """0-based session index per customer; views must be sorted by customer then time."""
    gaps = views.groupby("customer_id")["timestamp"].diff() > pd.Timedelta(minutes=gap_minutes)
    return gaps.astype(np.int64).groupby(views["customer_id"]).cumsum()


def _samples_for_date(
    views: pd.DataFrame, purchases: pd.DataFrame, base_date: datetime.date, config: FeatureConfig
) -> pd.DataFrame:
    base = _base_timestamp(base_date)
    start = base - pd.Timedelta(days=config.lookback_days)
    window = views[(views["timestamp"] >= start) & (views["timestamp"] < base)]
    if window.empty:
        return pd.DataFrame(columns=SAMPLE_COLUMNS)

    window = window.sort_values(["customer_id", "timestamp", "product_id"], kind="mergesort").copy()
    window["view_seq"] = window.groupby("customer_id").cumcount()
    window["session"] = assign_sessions(window, config.session_gap_minutes)
    window["day"] = window["timestamp"].dt.floor("D")

    customer = window.groupby("customer_id").agg(customer_seq=("view_seq", "max"), customer_session=("session", "max"))
    pairs = (
        window.groupby(["customer_id", "product_id"])
        .agg(
            category_id=("category_id", "last"),
            last_day=("day", "max"),
            last_seq=("view_seq", "max"),
            last_session=("session", "max"),
            views=("view_seq", "size"),
            sessions=("session", "nunique"),
            days=("day", "nunique"),
        )
        .reset_index()
        .join(customer, on="customer_id")
    )

    elapsed = {
        "dayr": (base - pairs["last_day"]).dt.days,
        "viewr": pairs["customer_seq"] - pairs["last_seq"] + 1,
        "sesr": pairs["customer_session"] - pairs["last_session"] + 1,
    }[config.recency_feature].to_numpy(dtype=np.int64)
    counts = {"viewf": pairs["views"], "sesf": pairs["sessions"], "dayf": pairs["days"]}[
        config.frequency_feature
    ].to_numpy(dtype=np.int64)

    horizon_end = base + pd.Timedelta(days=config.label_horizon_days)
    labelled = purchases[(purchases["timestamp"] >= base) & (purchases["timestamp"] < horizon_end)]
    bought = pd.MultiIndex.from_frame(labelled[["customer_id", "product_id"]].drop_duplicates())
    keys = pd.MultiIndex.from_frame(pairs[["customer_id", "product_id"]])

    return pd.DataFrame(
        {
            "base_date": base_date,
            "customer_id": pairs["customer_id"],
            "product_id": pairs["product_id"],
            "category_id": pairs["category_id"],
            "recency": np.maximum(config.recency_levels + 1 - elapsed, 1),
            "frequency": np.minimum(counts, config.frequency_levels),
            "purchased": keys.isin(bought),
            "recency_units": elapsed,
            "frequency_units": counts,
            "view_frequency": np.minimum(pairs["views"].to_numpy(dtype=np.int64), DEFAULT_LEVELS["viewf"]),
        },
        columns=SAMPLE_COLUMNS,
    )


def build_samples(
    events: Union[pd.DataFrame, Iterable[ClickEvent]],
    base_dates: Sequence[datetime.date],
    config: FeatureConfig,
    progress: bool = False,
) -> pd.DataFrame:
    """One labelled sample per customer-product pair viewed in the lookback window of each base date."""
    if not base_dates:
        raise ValueError("At least one base date is required")
    frame = events_frame(events)
    views = frame[frame["kind"] == KIND_VIEW]
    purchases = frame[frame["kind"] == KIND_PURCHASE]

    parts = [
        _samples_for_date(views, purchases, base_date, config)
        for base_date in tqdm(sorted(base_dates), desc="Base dates", disable=not progress)
    ]
    samples = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=SAMPLE_COLUMNS)
    samples = samples.sort_values(["base_date", "customer_id", "product_id"], kind="mergesort").reset_index(drop=True)
    logger.info(
        f"Built {len(samples)} samples ({int(samples['purchased'].sum())} purchases) "
        f"over {len(base_dates)} base dates with {DISPLAY_NAMES[config.recency_feature]} x "
        f"{DISPLAY_NAMES[config.frequency_feature]}"
    )
    return samples


def samples_frame(samples: Union[pd.DataFrame, Iterable[Sample]]) -> pd.DataFrame:
    if isinstance(samples, pd.DataFrame):
        return samples
    return pd.DataFrame([asdict(s) for s in samples], columns=SAMPLE_COLUMNS)


def iter_samples(samples: pd.DataFrame) -> Iterable[Sample]:
    for row in samples.loc[:, SAMPLE_COLUMNS].itertuples(index=False):
        yield Sample(
            base_date=row.base_date,
            customer_id=row.customer_id,
            product_id=row.product_id,
            category_id=row.category_id,
            recency=int(row.recency),
            frequency=int(row.frequency),
            purchased=bool(row.purchased),
            recency_units=int(row.recency_units),
            frequency_units=int(row.frequency_units),
            view_frequency=int(row.view_frequency),
        )


def subsample(samples: pd.DataFrame, rate: float, seed: int) -> pd.DataFrame:
    """Keep each sample independently with probability rate."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"Sampling rate must lie in (0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    keep = rng.random(len(samples)) < rate
    return samples[keep].reset_index(drop=True)


def aggregate_counts(
    samples: Union[pd.DataFrame, Iterable[Sample]],
    grid: GridSpec,
    categories: Sequence[str],
    recency_feature: Optional[str] = None,
    frequency_feature: Optional[str] = None,
    config: Optional[Dict[str, Any]] = None,
) -> CountTensor:
    samples = samples_frame(samples)
    categories = [str(k) for k in categories]
    lookup = {k: position for position, k in enumerate(categories)}

    unknown = sorted(set(samples["category_id"].astype(str)) - set(lookup))
    if unknown:
        raise InputError(f"Samples reference unknown categories: {unknown}")

    recency = samples["recency"].to_numpy(dtype=np.int64)
    frequency = samples["frequency"].to_numpy(dtype=np.int64)
    if len(samples) and (
        recency.min() < 1 or recency.max() > grid.recency_levels or frequency.min() < 1 or frequency.max() > grid.frequency_levels
    ):
        raise InputError(f"Sample levels fall outside the {grid.describe()} grid")

    k = samples["category_id"].astype(str).map(lookup).to_numpy(dtype=np.int64)
    n = np.zeros(grid.shape + (len(categories),), dtype=np.int64)
    q = np.zeros_like(n)
    np.add.at(n, (recency - 1, frequency - 1, k), 1)
    np.add.at(q, (recency - 1, frequency - 1, k), samples["purchased"].to_numpy(dtype=np.int64))
    return CountTensor(
        grid=grid,
        categories=tuple(categories),
        n=n,
        q=q,
        recency_feature=recency_feature,
        frequency_feature=frequency_feature,
        config=config or {},
    )


def suggest_levels(samples: pd.DataFrame, coverage: float = 0.95) -> Tuple[int, int]:
    """Smallest |I|, |J| for which fewer than (1 - coverage) of the pairs get clipped."""

    # clipped fractions compared in parts per million so that 5 of 100 counts as exactly 5%
    allowed = round((1.0 - coverage) * 1_000_000)

    def smallest(units: np.ndarray) -> int:
        if len(units) == 0:
            return 1
        units = np.sort(units)
        for level in range(1, int(units[-1]) + 1):
            clipped = len(units) - int(np.searchsorted(units, level, side="right"))
            if clipped * 1_000_000 < allowed * len(units):
                return level
        return int(units[-1])

    return (
        smallest(samples["recency_units"].to_numpy(dtype=np.int64)),
        smallest(samples["frequency_units"].to_numpy(dtype=np.int64)),
    )


def parse_base_dates(spec: str) -> List[datetime.date]:
    """'2015-09-03..2015-09-30' (inclusive) or a comma separated list of dates."""
    try:
        if ".." in spec:
            start, end = (datetime.date.fromisoformat(part.strip()) for part in spec.split("..", 1))
            if end < start:
                raise InputError(f"Base date range {spec!r} ends before it starts")
            return [start + datetime.timedelta(days=d) for d in range((end - start).days + 1)]
        return [datetime.date.fromisoformat(part.strip()) for part in spec.split(",") if part.strip()]
    except ValueError as ex:
        raise InputError(f"Invalid base dates {spec!r}: {ex}")


def write_samples(samples: pd.DataFrame, path: Union[str, Path]):
    with open(path, "w") as handle:
        for row in samples.loc[:, SAMPLE_COLUMNS].itertuples(index=False):
            record = dict(zip(SAMPLE_COLUMNS, row))
            record["base_date"] = pd.Timestamp(record["base_date"]).date().isoformat()
            for key in ("recency", "frequency", "recency_units", "frequency_units", "view_frequency"):
                record[key] = int(record[key])
            record["purchased"] = bool(record["purchased"])
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def read_samples(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Samples file not found: {path}")
    if path.stat().st_size == 0:
        return pd.DataFrame(columns=SAMPLE_COLUMNS)
    frame = pd.read_json(path, lines=True, dtype=False, convert_dates=False)
    missing = [c for c in SAMPLE_COLUMNS if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: samples are missing fields {missing}")
    frame = frame.loc[:, SAMPLE_COLUMNS]
    frame["base_date"] = pd.to_datetime(frame["base_date"]).dt.date
    for column in ("customer_id", "product_id", "category_id"):
        frame[column] = frame[column].astype(str)
    frame["purchased"] = frame["purchased"].astype(bool)
    return frame


@dataclass(frozen=True)
class SamplesMeta:
    """Grid and features a samples file was built with, kept in a sidecar next to it."""

    grid: GridSpec
    recency_feature: str
    frequency_feature: str
    config: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: FeatureConfig, resolved: Optional[Dict[str, Any]] = None) -> "SamplesMeta":
        return cls(config.grid, config.recency_feature, config.frequency_feature, dict(resolved or config.to_dict()))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "grid": self.grid.to_dict(),
            "recency_feature": self.recency_feature,
            "frequency_feature": self.frequency_feature,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SamplesMeta":
        return cls(
            grid=GridSpec.from_dict(data["grid"]),
            recency_feature=str(data["recency_feature"]),
            frequency_feature=str(data["frequency_feature"]),
            config=dict(data.get("config", {})),
        )


def samples_meta_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_samples_meta(path: Union[str, Path], meta: SamplesMeta) -> Path:
    meta_path = samples_meta_path(path)
    with open(meta_path, "w") as handle:
        handle.write(json.dumps(meta.to_dict(), sort_keys=True, indent=2) + "\n")
    return meta_path


def read_samples_meta(path: Union[str, Path]) -> Optional[SamplesMeta]:
    """The sidecar of a samples file, or None when the samples were produced elsewhere."""
    meta_path = samples_meta_path(path)
    if not meta_path.is_file():
        return None
    try:
        data = json.loads(meta_path.read_text())
    except json.JSONDecodeError as ex:
        raise InputError(f"{meta_path}: invalid JSON ({ex})")
    if not isinstance(data, dict) or data.get("schema_version") != SCHEMA_VERSION:
        raise InputError(f"{meta_path}: unsupported samples metadata, expected schema_version {SCHEMA_VERSION}")
    try:
        return SamplesMeta.from_dict(data)
    except (KeyError, TypeError, ValueError) as ex:
        raise InputError(f"{meta_path}: malformed samples metadata ({ex!r})")
