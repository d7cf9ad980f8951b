"""Ranking metrics, ROC export, window-similarity analysis and a linear 2D projection."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ROCPoint:
    threshold: float
    fpr: float
    tpr: float


@dataclass
class MetricsReport:
    config: str
    auc: float
    n_pos: int
    n_neg: int
    tpr_at_fpr_010: float

    def to_json(self, provenance: dict | None = None) -> str:
        doc = asdict(self)
        if provenance is not None:
            doc["provenance"] = provenance
        return json.dumps(doc, indent=1, sort_keys=True)


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise ValueError("AUC needs both classes present")
    return s, y


def _midranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    # tied groups share the average of their 1-based ranks
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + 1 + b) / 2.0
    return ranks


def auc_roc(scores, labels) -> float:
    """P(score_pos > score_neg) + half the tie probability (rank-sum form)."""
    s, y = _check(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    r = _midranks(s)[y].sum()
    return float((r - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores, labels) -> list[ROCPoint]:
    """Full ROC curve: one point per distinct score, thresholds descending, from (0, 0)."""
    s, y = _check(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    P, N = tp[-1], fp[-1]
    pts = [ROCPoint(math.inf, 0.0, 0.0)]
    pts += [ROCPoint(float(t), float(f / N), float(p / P)) for t, f, p in zip(s[last], fp, tp)]
    return pts


def cap_curve(points: Sequence[ROCPoint], fpr_cap: float) -> list[ROCPoint]:
    """Points with fpr <= cap, plus the first point beyond when it still raises tpr."""
    if not 0 < fpr_cap <= 1:
        raise ValueError("fpr_cap must lie in (0, 1]")
    kept = [p for p in points if p.fpr <= fpr_cap]
    beyond = next((p for p in points if p.fpr > fpr_cap), None)
    if beyond is not None and beyond.tpr > kept[-1].tpr:
        kept.append(beyond)
    return kept


def roc_curve(scores, labels, fpr_cap: float = 0.30) -> list[ROCPoint]:
    return cap_curve(roc_points(scores, labels), fpr_cap)


def tpr_at(points: Sequence[ROCPoint], fpr: float) -> float:
    """Linear interpolation along the curve; on a vertical step the upper end is used."""
    below = [p for p in points if p.fpr <= fpr]
    above = [p for p in points if p.fpr > fpr]
    a = below[-1]
    if not above:
        return a.tpr
    b = above[0]
    return a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr)


def trapezoid_auc(points: Sequence[ROCPoint]) -> float:
    f = np.array([p.fpr for p in points])
    t = np.array([p.tpr for p in points])
    return float(np.sum(np.diff(f) * (t[1:] + t[:-1]) / 2.0))


def metrics(scores, labels, config: str) -> tuple[MetricsReport, list[ROCPoint]]:
    s, y = _check(scores, labels)
    pts = roc_points(s, y)
    rep = MetricsReport(config, auc_roc(s, y), int(y.sum()), int((~y).sum()), tpr_at(pts, 0.10))
    return rep, pts


def write_roc_csv(points: Sequence[ROCPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.fpr), repr(p.tpr)])


# --- embedding analyses -----------------------------------------------------------------


def cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def neighbor_similarity(windows: np.ndarray) -> float:
    """Mean cosine between each window encoding and the mean of its immediate neighbors."""
    K = len(windows)
    if K < 2:
        raise ValueError("need at least two windows")
    sims = []
    for i in range(K):
        nb = [windows[j] for j in (i - 1, i + 1) if 0 <= j < K]
        sims.append(cosine(windows[i], np.mean(nb, axis=0)))
    return float(np.mean(sims))


@dataclass
class CosineSummary:
    legit_mean: float
    legit_var: float
    fraud_mean: float
    fraud_var: float
    n_legit: int
    n_fraud: int
    skipped: int

    @property
    def gap(self) -> float:
        return self.legit_mean - self.fraud_mean


def cosine_window_analysis(window_encodings: Sequence[np.ndarray], labels: Sequence[int]) -> CosineSummary:
    sims = {0: [], 1: []}
    skipped = 0
    for w, y in zip(window_encodings, labels):
        if len(w) < 2:
            skipped += 1
            continue
        sims[int(y)].append(neighbor_similarity(np.asarray(w, dtype=np.float64)))

    def mv(x):
        return (float(np.mean(x)), float(np.var(x))) if x else (math.nan, math.nan)

    (lm, lv), (fm, fv) = mv(sims[0]), mv(sims[1])
    return CosineSummary(lm, lv, fm, fv, len(sims[0]), len(sims[1]), skipped)


def jacobi_eigh(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues descending, eigenvectors as columns).
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or not np.allclose(A, A.T):
        raise ValueError("matrix must be square and symmetric")
    V = np.eye(n)
    scale = max(np.abs(A).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if A[p, q] == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                R = np.array([[c, s], [-s, c]])
                idx = [p, q]
                A[:, idx] = A[:, idx] @ R
                A[idx, :] = R.T @ A[idx, :]
                V[:, idx] = V[:, idx] @ R
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def pca_project(X, out_dim: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates on the top principal axes and their explained-variance fractions."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two rows")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    total = np.trace(cov)
    if total <= 0:
        return np.zeros((X.shape[0], out_dim)), np.zeros(out_dim)
    w, V = jacobi_eigh(cov)
    W = V[:, :out_dim].copy()
    for j in range(out_dim):
        if W[np.argmax(np.abs(W[:, j])), j] < 0:
            W[:, j] = -W[:, j]
    return Xc @ W, np.maximum(w[:out_dim], 0.0) / total


def write_projection_csv(path, party_ids, coords, labels, covariate) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["party_id", "x", "y", "label", "mean_amount"])
        for pid, (x, y), lab, cov in zip(party_ids, coords, labels, covariate):
            w.writerow([pid, repr(float(x)), repr(float(y)), "" if lab is None else lab, repr(float(cov))])
