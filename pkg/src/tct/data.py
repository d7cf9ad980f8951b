"""Transaction events, the synthetic corpus, feature schema and sequence segmentation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

N_CHANNELS = 4
N_COUNTERPARTIES = 512
DIRECTIONS = ("debit", "credit")
EPOCH0 = 1_600_000_000
DAY = 86_400
WEEK = 7 * DAY

MIN_HISTORY = 15
LOCAL_WINDOW = 3
MIN_LENGTH = MIN_HISTORY + LOCAL_WINDOW
SCHEMA_VERSION = 1
CSV_COLUMNS = ("party_id", "timestamp", "amount", "channel_id", "counterparty_id", "direction", "label")


@dataclass(frozen=True)
class Event:
    party_id: str
    timestamp: int
    amount: float
    channel_id: int
    counterparty_id: int
    direction: int  # index into DIRECTIONS
    inter_arrival: float = 0.0
    rolling_count_7d: float = 0.0
    is_new_counterparty: int = 0


@dataclass
class PartySequence:
    party_id: str
    events: list[Event]
    label: int | None = None

    def __post_init__(self):
        if not self.events:
            raise ValueError(f"party {self.party_id} has no events")

    def __len__(self):
        return len(self.events)

    @property
    def last_timestamp(self) -> int:
        return self.events[-1].timestamp


def derive_fields(events: Sequence[Event]) -> list[Event]:
    """Order events by (timestamp, ingestion order) and recompute derived fields."""
    ordered = sorted(events, key=lambda e: e.timestamp)  # stable
    out = []
    seen: set[int] = set()
    stamps: list[int] = []
    lo = 0
    for e in ordered:
        while lo < len(stamps) and stamps[lo] <= e.timestamp - WEEK:
            lo += 1
        gap = float(e.timestamp - stamps[-1]) if stamps else 0.0
        out.append(
            replace(
                e,
                inter_arrival=gap,
                rolling_count_7d=float(len(stamps) - lo),
                is_new_counterparty=int(e.counterparty_id not in seen),
            )
        )
        seen.add(e.counterparty_id)
        stamps.append(e.timestamp)
    return out


# --- synthetic corpus -----------------------------------------------------------


def _party(rng: np.random.Generator, pid: str, fraud: bool) -> PartySequence:
    T = int(rng.integers(MIN_LENGTH, 81))
    t = EPOCH0 + int(rng.integers(0, 365 * DAY))
    mu = rng.normal(4.0, 0.8)
    sigma = rng.uniform(0.15, 0.4)
    mean_gap = math.exp(rng.uniform(math.log(0.5 * DAY), math.log(4 * DAY)))
    channel_cdf = np.cumsum(rng.dirichlet(np.full(N_CHANNELS, 0.7)))
    pool = [int(c) for c in rng.choice(N_COUNTERPARTIES, size=int(rng.integers(3, 9)), replace=False)]
    p_credit = rng.uniform(0.1, 0.9)

    burst = range(0)
    if fraud:
        b = int(rng.integers(5, 11))
        s = int(rng.integers(MIN_HISTORY, max(MIN_HISTORY, T - b) + 1))
        burst = range(s, s + b)
        burst_scale = rng.uniform(4.0, 15.0)
    spree = range(0)
    if not fraud and rng.random() < 0.15:
        # benign cluster of quick, larger payments (travel, moving house)
        b = int(rng.integers(3, 7))
        s = int(rng.integers(1, T - b + 1))
        spree = range(s, s + b)
        spree_scale = rng.uniform(2.0, 6.0)

    used = set(pool)
    events = []
    for i in range(T):
        if i in burst:
            gap = rng.exponential(900.0)
            amount = math.exp(mu) * burst_scale * rng.lognormal(0.0, 0.3)
            fresh = int(rng.integers(N_COUNTERPARTIES))
            while fresh in used:
                fresh = int(rng.integers(N_COUNTERPARTIES))
            cpty = fresh
            channel = int(rng.integers(N_CHANNELS))
            direction = 0
        else:
            if i in spree:
                gap = rng.exponential(3600.0)
                amount = rng.lognormal(mu, sigma) * spree_scale
            else:
                gap = rng.gamma(12.0, mean_gap / 12.0)
                amount = rng.lognormal(mu, sigma)
            if rng.random() < 0.02:
                # occasional large legitimate purchase
                amount *= rng.uniform(3.0, 8.0)
            if rng.random() < (0.5 if i in spree else 0.95):
                cpty = pool[int(rng.integers(len(pool)))]
            else:
                cpty = int(rng.integers(N_COUNTERPARTIES))
            channel = min(int(np.searchsorted(channel_cdf, rng.random(), side="right")), N_CHANNELS - 1)
            direction = int(rng.random() < p_credit)
        if i:
            t += max(1, int(round(gap)))
        used.add(cpty)
        events.append(Event(pid, t, max(0.01, round(float(amount), 2)), channel, cpty, direction))
    return PartySequence(pid, derive_fields(events), int(fraud))


def generate_synthetic(n_parties: int, fraud_fraction: float, seed: int) -> list[PartySequence]:
    """Seeded synthetic corpus with a planted fraud regime.

    Legitimate parties transact log-normally around a stable personal mean at
    regular intervals with a small counterparty pool.  Fraud parties (drawn
    Bernoulli(fraud_fraction)) additionally contain a burst of 5-10 large,
    rapid payments to fresh counterparties starting after event 15.  Some
    legitimate parties have a milder benign spree of quick payments, so
    aggregate statistics alone do not separate the classes perfectly.
    """
    if n_parties < 1:
        raise ValueError("n_parties must be >= 1")
    if not 0.0 <= fraud_fraction <= 1.0:
        raise ValueError("fraud_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = rng.random(n_parties) < fraud_fraction
    return [_party(rng, f"P{i:06d}", bool(labels[i])) for i in range(n_parties)]


# --- CSV interchange -------------------------------------------------------------


def write_events_csv(parties: Iterable[PartySequence], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for p in parties:
            for i, e in enumerate(p.events):
                label = "" if i or p.label is None else str(p.label)
                w.writerow([e.party_id, e.timestamp, f"{e.amount:.2f}", e.channel_id,
                            e.counterparty_id, DIRECTIONS[e.direction], label])


def read_events_csv(path: str | Path) -> list[PartySequence]:
    rows: dict[str, list[Event]] = {}
    labels: dict[str, int | None] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
        for r in reader:
            pid = r["party_id"]
            if pid not in rows:
                rows[pid] = []
                labels[pid] = int(r["label"]) if r["label"] else None
            amount = float(r["amount"])
            if amount <= 0:
                raise ValueError(f"{path}: non-positive amount for party {pid}")
            rows[pid].append(Event(pid, int(r["timestamp"]), amount, int(r["channel_id"]),
                                   int(r["counterparty_id"]), DIRECTIONS.index(r["direction"])))
    return [PartySequence(pid, derive_fields(evs), labels[pid]) for pid, evs in rows.items()]


# --- feature schema ------------------------------------------------------------


@dataclass
class NumericFeature:
    name: str
    transform: str = "identity"  # or "log1p"
    mean: float = 0.0
    std: float = 1.0


@dataclass
class CategoricalFeature:
    name: str
    vocab_size: int
    embed_dim: int


@dataclass
class FeatureSchema:
    numeric_features: list[NumericFeature]
    categorical_features: list[CategoricalFeature]
    static_features: list[str] = field(default_factory=lambda: ["party_id", "timestamp"])
    # party-level numeric inputs to the static context path (off by default)
    static_numeric: list[NumericFeature] = field(default_factory=lambda: [NumericFeature("timestamp")])

    def __post_init__(self):
        dyn = set(self.dynamic_features)
        if dyn & set(self.static_features):
            raise ValueError(f"features both static and dynamic: {sorted(dyn & set(self.static_features))}")

    @property
    def dynamic_features(self) -> list[str]:
        return [f.name for f in self.numeric_features] + [f.name for f in self.categorical_features]

    @property
    def n_variables(self) -> int:
        return len(self.numeric_features) + len(self.categorical_features)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "numeric_features": [asdict(f) for f in self.numeric_features],
            "categorical_features": [asdict(f) for f in self.categorical_features],
            "static_features": list(self.static_features),
            "static_numeric": [asdict(f) for f in self.static_numeric],
            "dynamic_features": self.dynamic_features,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSchema":
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {obj.get('schema_version')!r}")
        return cls(
            [NumericFeature(**f) for f in obj["numeric_features"]],
            [CategoricalFeature(**f) for f in obj["categorical_features"]],
            list(obj["static_features"]),
            [NumericFeature(**f) for f in obj["static_numeric"]],
        )

    def save(self, path: str | Path, provenance: dict | None = None) -> None:
        obj = self.to_json()
        if provenance is not None:
            obj["provenance"] = provenance
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_json(json.loads(Path(path).read_text()))


def default_schema(embed_dim: int = 32) -> FeatureSchema:
    return FeatureSchema(
        numeric_features=[
            NumericFeature("amount", "log1p"),
            NumericFeature("inter_arrival", "log1p"),
            NumericFeature("rolling_count_7d"),
            NumericFeature("is_new_counterparty"),
        ],
        categorical_features=[
            CategoricalFeature("channel_id", N_CHANNELS, embed_dim),
            CategoricalFeature("counterparty_id", N_COUNTERPARTIES, embed_dim),
            CategoricalFeature("direction", len(DIRECTIONS), embed_dim),
        ],
    )


def _transform(values: np.ndarray, transform: str) -> np.ndarray:
    if transform == "identity":
        return values
    if transform == "log1p":
        return np.log1p(values)
    raise ValueError(f"unknown transform {transform!r}")


def _raw_numeric(seq: PartySequence, f: NumericFeature) -> np.ndarray:
    vals = np.array([float(getattr(e, f.name)) for e in seq.events])
    return _transform(vals, f.transform)


def _raw_static(seq: PartySequence, f: NumericFeature) -> float:
    # static inputs are party-level: the value at the first event
    return float(_transform(np.array([float(getattr(seq.events[0], f.name))]), f.transform)[0])


def _mean_std(values: list[float]) -> tuple[float, float]:
    # fsum is exactly rounded, so the result does not depend on party order
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


def fit_standardizer(train: Sequence[PartySequence], schema: FeatureSchema) -> FeatureSchema:
    """Population mean/std of every numeric feature over the training events."""
    if not train:
        raise ValueError("cannot fit a standardizer on an empty training set")
    numeric = []
    for f in schema.numeric_features:
        vals = np.concatenate([_raw_numeric(p, f) for p in train]).tolist()
        mean, std = _mean_std(vals)
        numeric.append(replace(f, mean=mean, std=std))
    static = []
    for f in schema.static_numeric:
        mean, std = _mean_std([_raw_static(p, f) for p in train])
        static.append(replace(f, mean=mean, std=std))
    return replace(schema, numeric_features=numeric, static_numeric=static)


def standardize(x, mean: float, std: float):
    if std == 0:
        return x * 0.0
    return (x - mean) / std


def event_arrays(seq: PartySequence, schema: FeatureSchema) -> tuple[np.ndarray, np.ndarray]:
    """Standardized numeric [T, n_num] and categorical index [T, n_cat] arrays."""
    T = len(seq)
    num = np.empty((T, len(schema.numeric_features)))
    for j, f in enumerate(schema.numeric_features):
        num[:, j] = standardize(_raw_numeric(seq, f), f.mean, f.std)
    cat = np.empty((T, len(schema.categorical_features)), dtype=np.int64)
    for j, f in enumerate(schema.categorical_features):
        cat[:, j] = [getattr(e, f.name) for e in seq.events]
    return num, cat


def static_array(seq: PartySequence, schema: FeatureSchema) -> np.ndarray:
    return np.array([standardize(_raw_static(seq, f), f.mean, f.std) for f in schema.static_numeric])


# --- segmentation --------------------------------------------------------------


class InsufficientHistory(ValueError):
    pass


@dataclass
class SegmentPlan:
    boundaries: list[tuple[int, int]]
    future: tuple[int, int]
    min_history: int = MIN_HISTORY
    local_window: int = LOCAL_WINDOW

    @property
    def num_global(self) -> int:
        return len(self.boundaries)


def auto_k_global(history: int) -> int:
    return 5 if history < 30 else 6


def plan_segments(T: int, k_global: int | None = None, min_history: int = MIN_HISTORY,
                  local_window: int = LOCAL_WINDOW) -> SegmentPlan:
    if T < min_history + local_window:
        raise InsufficientHistory(
            f"insufficient history: {T} events, need {min_history + local_window}")
    history = T - local_window
    k = auto_k_global(history) if k_global is None else k_global
    if not 1 <= k <= history:
        raise ValueError(f"cannot split {history} history events into {k} sub-sequences")
    base, extra = divmod(history, k)
    bounds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        bounds.append((start, start + size))
        start += size
    return SegmentPlan(bounds, (history, T), min_history, local_window)


def segment(seq: PartySequence, k_global: int | None = None, min_history: int = MIN_HISTORY,
            local_window: int = LOCAL_WINDOW) -> SegmentPlan:
    return plan_segments(len(seq), k_global, min_history, local_window)


def eligible(parties: Iterable[PartySequence], min_length: int = MIN_LENGTH):
    """Split parties into (accepted, rejected) by the minimum-length rule."""
    accepted, rejected = [], []
    for p in parties:
        (accepted if len(p) >= min_length else rejected).append(p)
    if rejected:
        log.warning("excluded %d parties with insufficient history", len(rejected))
    return accepted, rejected


# --- chronological split ----------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[PartySequence]
    validation: list[PartySequence]
    test: list[PartySequence]
    boundary_timestamps: tuple[int, int]


def chrono_split(parties: Sequence[PartySequence],
                 fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)) -> DatasetSplit:
    """Assign parties to train/validation/test by the time of their last event."""
    if len(parties) < 3:
        raise ValueError("chronological split needs at least 3 parties")
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be positive and sum to 1")
    ordered = sorted(parties, key=lambda p: (p.last_timestamp, p.party_id))
    n = len(ordered)
    stamps = [p.last_timestamp for p in ordered]

    def cut(frac: float) -> int:
        i = min(max(int(round(frac * n)), 1), n - 1)
        # parties sharing a last timestamp stay on the same side
        while 0 < i < n and stamps[i - 1] == stamps[i]:
            i -= 1
        return i

    i1 = cut(fractions[0])
    i2 = max(cut(fractions[0] + fractions[1]), i1)
    return DatasetSplit(ordered[:i1], ordered[i1:i2], ordered[i2:],
                        (stamps[i1] if i1 < n else stamps[-1] + 1, stamps[i2] if i2 < n else stamps[-1] + 1))
