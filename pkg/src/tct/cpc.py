"""Contrastive predictive coding head and the InfoNCE objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numeric as nm
from .encoder import Encoder, PackedBatch, PartyTensors, horizon_window, pack, valid_horizons


@dataclass
class LossReport:
    per_horizon: list[float]  # nan where a horizon had fewer than two valid anchors
    total: float
    accuracy: float
    n_pairs: int


def info_nce(z_hat, z_pos, negatives, tau: float) -> float:
    """-log softmax score of the positive among the positive and negatives (raw dot products)."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z_hat = np.asarray(z_hat, dtype=np.float64)
    cands = np.vstack([np.asarray(z_pos, dtype=np.float64)[None]] +
                      [np.asarray(n, dtype=np.float64)[None] for n in negatives])
    if cands.shape[1] != z_hat.shape[0]:
        raise ValueError("all vectors must share one dimension")
    logits = cands @ z_hat / tau
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite similarity in info_nce")
    return float(nm.logsumexp(logits) - logits[0])


def info_nce_batch(z_hat, z, tau: float):
    """In-batch InfoNCE: anchor i's positive is z[i], its negatives are z[j != i].

    Returns (mean loss, accuracy, dz_hat, dz) for the mean loss.
    """
    n = z_hat.shape[0]
    if n < 2:
        raise ValueError("in-batch negatives need at least two anchors")
    logits = z_hat @ z.T / tau
    lse = nm.logsumexp(logits, axis=1)
    diag = np.diagonal(logits)
    loss = float(np.mean(lse - diag))
    acc = float(np.mean(np.argmax(logits, axis=1) == np.arange(n)))
    dlogits = np.exp(logits - lse[:, None])
    dlogits[np.diag_indices(n)] -= 1.0
    dlogits /= n * tau
    return loss, acc, dlogits @ z, dlogits.T @ z_hat


def sample_negatives(positives: np.ndarray, anchor: int) -> np.ndarray:
    """Positives of every other anchor at the same horizon."""
    if positives.shape[0] < 2:
        raise ValueError("need at least two anchors for in-batch negatives")
    return np.delete(positives, anchor, axis=0)


def sample_anchors(items: Sequence[PartyTensors], horizons: int, rng: np.random.Generator) -> list[int]:
    """One anchor per party, uniform over sub-sequences whose every horizon fits.

    Parties with no such anchor fall back to anchors with at least one valid
    horizon; the missing horizons are masked out of the loss.
    """
    out = []
    for it in items:
        K, T = it.plan.num_global, len(it)
        counts = [valid_horizons(it.plan, k, horizons, T) for k in range(1, K + 1)]
        full = [k for k, c in zip(range(1, K + 1), counts) if c == horizons]
        pool = full or [k for k, c in zip(range(1, K + 1), counts) if c > 0]
        if not pool:
            raise ValueError(f"party {it.party_id} has no future window")
        out.append(pool[int(rng.integers(len(pool)))])
    return out


def make_batch(encoder: Encoder, items: Sequence[PartyTensors], rng: np.random.Generator) -> PackedBatch:
    anchors = sample_anchors(items, encoder.config.horizons, rng)
    return pack(items, anchors, encoder.config.horizons, dtype=encoder.config.dtype)


def cpc_loss(encoder: Encoder, batch: PackedBatch, tau: float, backward: bool = True) -> LossReport:
    """Multi-horizon InfoNCE averaged over realized horizons; accumulates grads if asked."""
    state = encoder.forward(batch)
    c = state.context
    per, accs, weights = [], [], []
    grads = []
    for j in range(encoder.config.horizons):
        rows = np.flatnonzero(batch.fut_valid[:, j])
        if rows.size < 2:
            per.append(math.nan)
            continue
        W = encoder.params[f"head.{j + 1}"].value
        z_hat = c[rows] @ W.T
        z = state.summaries[batch.fut_win[rows, j]]
        loss, acc, dzh, dz = info_nce_batch(z_hat, z, tau)
        per.append(loss)
        accs.append(acc)
        weights.append(rows.size)
        grads.append((j, rows, dzh, dz))
    if not grads:
        raise ValueError("batch has no horizon with two or more valid anchors")
    realized = [x for x in per if not math.isnan(x)]
    total = float(np.mean(realized))
    if not math.isfinite(total):
        raise FloatingPointError("non-finite contrastive loss")
    report = LossReport(per, total, float(np.average(accs, weights=weights)), int(sum(weights)))
    if backward:
        scale = 1.0 / len(realized)
        dsum = np.zeros_like(state.summaries)
        dctx = np.zeros_like(c)
        for j, rows, dzh, dz in grads:
            dzh = dzh * scale
            head = encoder.params[f"head.{j + 1}"]
            head.grad += dzh.T @ c[rows]
            dctx[rows] += dzh @ head.value
            np.add.at(dsum, batch.fut_win[rows, j], dz * scale)
        encoder.backward(batch, state, dsum, dctx)
    return report


def encode_future(encoder: Encoder, item: PartyTensors, anchor: int, k: int) -> np.ndarray:
    """Short-term encoding of the k-th window after ``anchor``; never touches the long-term LSTM."""
    span = horizon_window(item.plan, anchor, k, len(item))
    if span is None:
        raise IndexError(f"future window {k} after sub-sequence {anchor} exceeds the sequence")
    batch = pack([item], [anchor], k, dtype=encoder.config.dtype)
    return encoder.forward(batch).summaries[batch.fut_win[0, k - 1]]
