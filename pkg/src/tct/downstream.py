"""Frozen-encoder embeddings, engineered baseline features and a second-order boosted-tree classifier."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DAY, N_CHANNELS, FeatureSchema, MIN_LENGTH, PartySequence, plan_segments
from .encoder import Embedding, Encoder, embed_batch, prepare

log = logging.getLogger(__name__)

MODES = ("raw", "raw+emb", "emb-only")

ENGINEERED = (
    "count_total",
    "mean_amount",
    "std_amount",
    "max_amount",
    "mean_inter_arrival",
    "min_inter_arrival",
    "distinct_counterparties",
    "new_counterparty_rate",
    "burstiness",
) + tuple(f"channel_{c}_share" for c in range(N_CHANNELS))


# --- features ------------------------------------------------------------------------


def history_events(seq: PartySequence, local_window: int = 3):
    """Events the encoder sees for a party: everything but the reserved future window."""
    if len(seq) < MIN_LENGTH:
        return seq.events
    lo, _ = plan_segments(len(seq), local_window=local_window).future
    return seq.events[:lo]


def engineered_features(seq: PartySequence, local_window: int = 3) -> np.ndarray:
    """Aggregate behavioral features over a party's history (inter-arrivals in days)."""
    ev = history_events(seq, local_window)
    amounts = np.array([e.amount for e in ev])
    gaps = np.array([e.inter_arrival for e in ev[1:]]) / DAY
    mean_gap = gaps.mean() if gaps.size else 0.0
    channels = np.bincount([e.channel_id for e in ev], minlength=N_CHANNELS) / len(ev)
    return np.concatenate([[
        len(ev),
        amounts.mean(),
        amounts.std(),
        amounts.max(),
        mean_gap,
        gaps.min() if gaps.size else 0.0,
        len({e.counterparty_id for e in ev}),
        np.mean([e.is_new_counterparty for e in ev]),
        gaps.std() / mean_gap if mean_gap > 0 else 0.0,
    ], channels])


@dataclass
class FeatureRow:
    party_id: str
    engineered: np.ndarray
    embedding: np.ndarray | None = None
    label: int | None = None

    def vector(self, mode: str) -> np.ndarray:
        if mode == "raw":
            return self.engineered
        if self.embedding is None:
            raise ValueError(f"party {self.party_id} has no embedding")
        if mode == "emb-only":
            return self.embedding
        if mode == "raw+emb":
            return np.concatenate([self.engineered, self.embedding])
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")


def feature_names(mode: str, d: int = 32) -> list[str]:
    emb = [f"e_{i}" for i in range(d)]
    return {"raw": list(ENGINEERED), "raw+emb": list(ENGINEERED) + emb, "emb-only": emb}[mode]


def extract_embeddings(encoder: Encoder, parties: Sequence[PartySequence], schema: FeatureSchema,
                       ) -> tuple[list[Embedding], list[str]]:
    """Embed every eligible party with a frozen encoder; returns (embeddings, excluded ids)."""
    ok = [p for p in parties if len(p) >= MIN_LENGTH]
    excluded = [p.party_id for p in parties if len(p) < MIN_LENGTH]
    if excluded:
        log.warning("%d parties too short to embed", len(excluded))
    items = prepare(ok, schema, encoder.config.k_global, encoder.config.local_window)
    vecs = embed_batch(encoder, items)
    return [Embedding(p.party_id, v.astype(np.float64)) for p, v in zip(ok, vecs)], excluded


def table_hash(embeddings: Sequence[Embedding]) -> str:
    h = hashlib.sha256()
    for e in embeddings:
        h.update(e.party_id.encode())
        h.update(np.ascontiguousarray(e.vector, dtype="<f8").tobytes())
    return h.hexdigest()


def build_features(parties: Sequence[PartySequence], mode: str,
                   embeddings: Sequence[Embedding] | None = None) -> tuple[list[FeatureRow], list[str]]:
    """Assemble feature rows for ``mode``; returns (rows, feature-name manifest)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    table = {e.party_id: e.vector for e in embeddings or ()}
    if mode != "raw" and not table:
        raise ValueError(f"mode {mode} needs embeddings")
    rows, dropped = [], 0
    for p in parties:
        emb = table.get(p.party_id)
        if mode != "raw" and emb is None:
            dropped += 1
            continue
        rows.append(FeatureRow(p.party_id, engineered_features(p), emb, p.label))
    if dropped:
        log.warning("dropped %d parties without embeddings", dropped)
    d = len(next(iter(table.values()))) if table else 32
    return rows, feature_names(mode, d)


def write_embeddings_csv(embeddings: Sequence[Embedding], path: str | Path) -> None:
    d = len(embeddings[0].vector) if embeddings else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["party_id"] + [f"e_{i}" for i in range(d)])
        for e in embeddings:
            w.writerow([e.party_id] + [repr(float(x)) for x in e.vector])


def read_embeddings_csv(path: str | Path) -> list[Embedding]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [Embedding(row[0], np.array([float(x) for x in row[1:]])) for row in r]


# --- gradient-boosted trees -------------------------------------------------------------


@dataclass
class GBDTConfig:
    n_estimators: int = 100
    max_depth: int = 5
    learning_rate: float = 0.3
    reg_lambda: float = 1.0
    reg_alpha: float = 0.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    base_score: float = 0.5

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 0 or self.reg_lambda < 0 or self.reg_alpha < 0:
            raise ValueError("max_depth, reg_lambda and reg_alpha must be non-negative")
        if not 0 < self.base_score < 1:
            raise ValueError("base_score must lie in (0, 1)")


@dataclass
class Node:
    # internal nodes use feature/threshold/left/right; leaves only weight
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    default_left: bool = True
    weight: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class Tree:
    nodes: list[Node]

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0])
        for i, x in enumerate(X):
            n = self.nodes[0]
            while not n.is_leaf:
                v = x[n.feature]
                go_left = n.default_left if math.isnan(v) else v < n.threshold
                n = self.nodes[n.left if go_left else n.right]
            out[i] = n.weight
        return out

    def depth(self, i: int = 0) -> int:
        n = self.nodes[i]
        return 0 if n.is_leaf else 1 + max(self.depth(n.left), self.depth(n.right))


@dataclass
class GBDTModel:
    config: GBDTConfig
    trees: list[Tree]
    base_logit: float
    feature_names: list[str] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or (self.feature_names and X.shape[1] != len(self.feature_names)):
            raise ValueError(f"expected {len(self.feature_names)} features: {self.feature_names}")
        F = np.full(X.shape[0], self.base_logit)
        for t in self.trees:
            F += self.config.learning_rate * t.predict(X)
        return F

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "base_logit": self.base_logit,
            "feature_names": self.feature_names,
            "train_loss": self.train_loss,
            "trees": [[({"weight": n.weight} if n.is_leaf else
                        {"feature": n.feature, "threshold": n.threshold, "left": n.left,
                         "right": n.right, "default_left": n.default_left}) for n in t.nodes]
                      for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GBDTModel":
        trees = [Tree([Node(weight=n["weight"]) if "weight" in n else
                       Node(n["feature"], n["threshold"], n["left"], n["right"], n["default_left"])
                       for n in t]) for t in d["trees"]]
        return cls(GBDTConfig(**d["config"]), trees, d["base_logit"], d["feature_names"], d["train_loss"])

    def save(self, path, extra: dict | None = None) -> None:
        doc = self.to_dict()
        if extra:
            doc["provenance"] = extra
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "GBDTModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logloss(y, F) -> float:
    # log(1 + e^F) - yF, stable
    return float(np.mean(np.logaddexp(0.0, F) - y * F))


def _soft(G, alpha):
    return np.sign(G) * np.maximum(np.abs(G) - alpha, 0.0)


def _score(G, H, cfg: GBDTConfig):
    t = _soft(G, cfg.reg_alpha)
    return t * t / (H + cfg.reg_lambda)


def leaf_weight(G: float, H: float, cfg: GBDTConfig) -> float:
    return float(-_soft(G, cfg.reg_alpha) / (H + cfg.reg_lambda))


def _build(X, order, rows, g, h, depth, cfg, nodes) -> int:
    """Grow a subtree over ``rows`` (boolean mask); returns its node index."""
    me = len(nodes)
    nodes.append(Node())
    G, H = g[rows].sum(), h[rows].sum()
    nodes[me].weight = leaf_weight(G, H, cfg)
    m = int(rows.sum())
    if depth >= cfg.max_depth or m < 2:
        return me
    idx = order[rows[order]].reshape(order.shape[0], m)  # node rows sorted per feature
    xs = np.take_along_axis(X.T, idx, axis=1)
    GL = np.cumsum(g[idx], axis=1)[:, :-1]
    HL = np.cumsum(h[idx], axis=1)[:, :-1]
    GR, HR = G - GL, H - HL
    gain = 0.5 * (_score(GL, HL, cfg) + _score(GR, HR, cfg) - _score(G, H, cfg)) - cfg.gamma
    ok = (xs[:, :-1] < xs[:, 1:]) & (HL >= cfg.min_child_weight) & (HR >= cfg.min_child_weight)
    gain = np.where(ok, gain, -np.inf)
    # first maximum in row-major order = lowest feature, then lowest threshold;
    # gains equal up to rounding count as ties
    top = gain.max()
    best = int(np.argmax(gain >= top - 1e-12 * max(1.0, abs(top))))
    f, j = divmod(best, gain.shape[1])
    if not gain[f, j] > 0:
        return me
    thr = 0.5 * (xs[f, j] + xs[f, j + 1])
    if not thr > xs[f, j]:
        thr = xs[f, j + 1]
    go_left = rows & (X[:, f] < thr)
    node = nodes[me]
    node.feature, node.threshold = f, float(thr)
    node.left = _build(X, order, go_left, g, h, depth + 1, cfg, nodes)
    node.right = _build(X, order, rows & ~go_left, g, h, depth + 1, cfg, nodes)
    return me


def fit_gbdt(X, y, cfg: GBDTConfig | None = None, feature_names: Sequence[str] | None = None) -> GBDTModel:
    """Exact-greedy boosting of depth-limited trees on the logistic loss."""
    cfg = cfg or GBDTConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be [n, f] with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if len(np.unique(y)) < 2:
        raise ValueError("training labels contain a single class")
    # canonical row order makes the fit independent of input order
    canon = np.lexsort(np.column_stack([X, y]).T[::-1])
    X, y = X[canon], y[canon]
    order = np.argsort(X, axis=0, kind="stable").T.copy()
    base = math.log(cfg.base_score / (1.0 - cfg.base_score))
    F = np.full(len(y), base)
    model = GBDTModel(cfg, [], base, list(feature_names or []), [_logloss(y, F)])
    everything = np.ones(len(y), dtype=bool)
    for _ in range(cfg.n_estimators):
        p = _sigmoid(F)
        g, h = p - y, p * (1.0 - p)
        nodes: list[Node] = []
        _build(X, order, everything, g, h, 0, cfg, nodes)
        tree = Tree(nodes)
        model.trees.append(tree)
        F = F + cfg.learning_rate * tree.predict(X)
        model.train_loss.append(_logloss(y, F))
    return model


def fit_rows(rows: Sequence[FeatureRow], mode: str, cfg: GBDTConfig | None = None,
             names: Sequence[str] | None = None) -> GBDTModel:
    X = np.stack([r.vector(mode) for r in rows])
    return fit_gbdt(X, [r.label for r in rows], cfg, names)


@dataclass
class RiskScore:
    party_id: str
    r: float
    flagged: bool
    threshold: float


def predict_risk(model: GBDTModel, rows: Sequence[FeatureRow], mode: str,
                 alpha_flag: float = 0.5) -> list[RiskScore]:
    """Fraud probability per row; flagged strictly above ``alpha_flag``."""
    if not rows:
        return []
    X = np.stack([r.vector(mode) for r in rows])
    r = model.predict_proba(X)
    return [RiskScore(row.party_id, float(v), bool(v > alpha_flag), alpha_flag) for row, v in zip(rows, r)]


def write_scores_csv(scores: Sequence[RiskScore], path: str | Path, labels: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["party_id", "r", "flagged"] + (["label"] if labels is not None else []))
        for s in scores:
            row = [s.party_id, repr(s.r), int(s.flagged)]
            if labels is not None:
                row.append(labels.get(s.party_id, ""))
            w.writerow(row)


def read_scores_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"party_id": r["party_id"], "r": float(r["r"]), "flagged": r["flagged"] == "1",
                 "label": int(r["label"]) if r.get("label") not in (None, "") else None}
                for r in csv.DictReader(fh)]
