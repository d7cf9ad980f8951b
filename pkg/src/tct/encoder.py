"""The sequence encoder: variable selection, two-level LSTM, context and embeddings.

Everything runs on packed batches.  A :class:`PackedBatch` holds the flat
events of several parties, the local windows (index lists into the flat
events) that the short-term LSTM scans, and per party the ordered list of
history windows that the long-term LSTM scans.  Forward passes keep their
caches so the matching backward pass can replay them in reverse.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numeric as nm
from .data import (
    LOCAL_WINDOW,
    FeatureSchema,
    PartySequence,
    SegmentPlan,
    event_arrays,
    segment,
    static_array,
)

CONTEXT_MODES = ("last", "attention")


@dataclass(frozen=True)
class EncoderConfig:
    numeric_names: tuple[str, ...]
    categorical: tuple[tuple[str, int], ...]  # (name, vocab size)
    d_e: int = 32
    d_h: int = 32
    grn_hidden: int = 32
    horizons: int = 2
    context_mode: str = "last"
    n_heads: int = 4
    static_context: bool = False
    n_static: int = 1
    k_global: int | None = None
    local_window: int = LOCAL_WINDOW
    precision: str = "float64"

    def __post_init__(self):
        if self.context_mode not in CONTEXT_MODES:
            raise ValueError(f"context_mode must be one of {CONTEXT_MODES}")
        if self.context_mode == "attention" and self.d_h % self.n_heads:
            raise ValueError("d_h must be divisible by n_heads")
        if self.horizons < 1:
            raise ValueError("need at least one prediction horizon")
        nm.resolve_dtype(self.precision)

    @classmethod
    def from_schema(cls, schema: FeatureSchema, **kw) -> "EncoderConfig":
        dims = {f.embed_dim for f in schema.categorical_features}
        d_e = kw.pop("d_e", dims.pop() if len(dims) == 1 else 32)
        return cls(
            numeric_names=tuple(f.name for f in schema.numeric_features),
            categorical=tuple((f.name, f.vocab_size) for f in schema.categorical_features),
            d_e=d_e,
            grn_hidden=kw.pop("grn_hidden", d_e),
            n_static=len(schema.static_numeric),
            **kw,
        )

    @property
    def n_variables(self) -> int:
        return len(self.numeric_names) + len(self.categorical)

    @property
    def dtype(self):
        return nm.resolve_dtype(self.precision)

    def architecture(self) -> dict:
        arch = asdict(self)
        arch.pop("precision")
        arch["recurrent_cell"] = nm.RECURRENT_CELL
        return arch

    def fingerprint(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --- gated residual network ---------------------------------------------------


def grn(a, c, p):
    """LayerNorm(skip(a) + GLU(W1 ELU(W2 a [+ W3 c] + b2) + b1)).

    ``p`` maps w2, b2, w1, b1, gamma, beta and optionally w3 (context) and
    skip (when output and input sizes differ) to arrays.  Weight tensors with
    a leading variable axis apply one GRN per variable to a[..., M, m].
    """
    pre = nm.linear(a, p["w2"], p["b2"])
    if c is not None:
        if "w3" not in p:
            raise ValueError("context supplied to a GRN without a context weight")
        pre = pre + nm.linear(c, p["w3"])
    eta2, c_elu = nm.elu(pre)
    eta1 = nm.linear(eta2, p["w1"], p["b1"])
    gated, c_glu = nm.glu(eta1)
    skip = nm.linear(a, p["skip"]) if "skip" in p else a
    if skip.shape != gated.shape:
        raise ValueError(f"GRN residual shape {skip.shape} does not match gate output {gated.shape}")
    out, c_ln = nm.layer_norm(skip + gated, p["gamma"], p["beta"])
    return out, (a, c, eta2, c_elu, c_glu, c_ln)


def grn_backward(dout, cache, p):
    """Returns (da, dc, grads) with grads keyed like ``p``."""
    a, c, eta2, c_elu, c_glu, c_ln = cache
    g = {}
    dsum, g["gamma"], g["beta"] = nm.layer_norm_backward(dout, c_ln)
    if "skip" in p:
        da, g["skip"], _ = nm.linear_backward(dsum, a, p["skip"], with_bias=False)
    else:
        da = dsum
    deta1 = nm.glu_backward(dsum, c_glu)
    deta2, g["w1"], g["b1"] = nm.linear_backward(deta1, eta2, p["w1"])
    dpre = nm.elu_backward(deta2, c_elu)
    da2, g["w2"], g["b2"] = nm.linear_backward(dpre, a, p["w2"])
    dc = None
    if c is not None:
        dc, g["w3"], _ = nm.linear_backward(dpre, c, p["w3"], with_bias=False)
    return da + da2, dc, g


# --- masked recurrent scan ------------------------------------------------------


def lstm_scan(X, mask, cell: nm.LSTMCellParams):
    """Scan left-aligned padded sequences X[W, L, d_in] from a zero state.

    Where ``mask`` is False the state is carried unchanged, so the final
    state equals the state after each sequence's last real step.
    Returns (H[W, L, d_h], final[W, d_h], cache).
    """
    W, L = mask.shape
    d_h = cell.hidden_size
    h = np.zeros((W, d_h), dtype=X.dtype)
    c = np.zeros_like(h)
    H = np.empty((W, L, d_h), dtype=X.dtype)
    caches = []
    for t in range(L):
        (hn, cn), ct = nm.lstm_cell(X[:, t], h, c, cell)
        m = mask[:, t, None]
        h = np.where(m, hn, h)
        c = np.where(m, cn, c)
        H[:, t] = h
        caches.append(ct)
    return H, h, (mask, caches, X.shape)


def lstm_scan_backward(dH, cache, cell: nm.LSTMCellParams):
    """``dH`` is the gradient w.r.t. every carried state H[:, t].

    Returns (dX, grads) with grads keyed wx, wh, b.
    """
    mask, caches, xshape = cache
    W, L, _ = xshape
    dX = np.zeros(xshape, dtype=dH.dtype)
    dh = np.zeros((W, cell.hidden_size), dtype=dH.dtype)
    dc = np.zeros_like(dh)
    g = {"wx": np.zeros_like(cell.input_weights), "wh": np.zeros_like(cell.hidden_weights),
         "b": np.zeros_like(cell.bias)}
    for t in reversed(range(L)):
        dh = dh + dH[:, t]
        m = mask[:, t, None]
        dx, dhp, dcp, dwx, dwh, db = nm.lstm_cell_backward(np.where(m, dh, 0), np.where(m, dc, 0),
                                                           caches[t], cell)
        dh = np.where(m, dhp, dh)
        dc = np.where(m, dcp, dc)
        dX[:, t] = dx
        g["wx"] += dwx
        g["wh"] += dwh
        g["b"] += db
    return dX, g


# --- packing ----------------------------------------------------------------------


@dataclass
class PartyTensors:
    party_id: str
    num: np.ndarray
    cat: np.ndarray
    static: np.ndarray
    plan: SegmentPlan
    label: int | None = None

    def __len__(self):
        return self.num.shape[0]


def prepare(parties: Sequence[PartySequence], schema: FeatureSchema,
            k_global: int | None = None, local_window: int = LOCAL_WINDOW) -> list[PartyTensors]:
    """Standardize and segment parties; raises InsufficientHistory on short ones."""
    out = []
    for p in parties:
        plan = segment(p, k_global, local_window=local_window)
        num, cat = event_arrays(p, schema)
        out.append(PartyTensors(p.party_id, num, cat, static_array(p, schema), plan, p.label))
    return out


def horizon_window(plan: SegmentPlan, anchor: int, k: int, n_events: int) -> tuple[int, int] | None:
    """Events of the k-th future window after history sub-sequence ``anchor`` (both 1-based)."""
    end = plan.boundaries[anchor - 1][1]
    lo, hi = end + (k - 1) * plan.local_window, end + k * plan.local_window
    return (lo, hi) if hi <= n_events else None


def valid_horizons(plan: SegmentPlan, anchor: int, horizons: int, n_events: int) -> int:
    return sum(horizon_window(plan, anchor, k, n_events) is not None for k in range(1, horizons + 1))


@dataclass
class PackedBatch:
    num: np.ndarray  # [N, n_num]
    cat: np.ndarray  # [N, n_cat]
    static: np.ndarray  # [N, n_static], party value repeated per event
    win_idx: np.ndarray  # [W, Lmax] flat event ids
    win_mask: np.ndarray  # [W, Lmax]
    ctx_win: np.ndarray  # [B, Kmax] window ids
    ctx_mask: np.ndarray  # [B, Kmax]
    fut_win: np.ndarray  # [B, H] window ids
    fut_valid: np.ndarray  # [B, H]
    party_ids: list[str] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.ctx_win.shape[0]


def pack(items: Sequence[PartyTensors], anchors: Sequence[int] | None = None, horizons: int = 0,
         dtype=np.float64) -> PackedBatch:
    """Pack parties into one batch.

    ``anchors[b]`` is the number of history sub-sequences forming party b's
    context (default: all of them); ``horizons`` future windows follow it.
    """
    if not items:
        raise ValueError("cannot pack an empty batch")
    if anchors is None:
        anchors = [it.plan.num_global for it in items]
    nums, cats, stats = [], [], []
    windows: list[tuple[int, int]] = []
    ctx, fut, fut_ok = [], [], []
    offset = 0
    for it, k in zip(items, anchors):
        if not 1 <= k <= it.plan.num_global:
            raise ValueError(f"anchor {k} out of range for party {it.party_id}")
        T = len(it)
        end = it.plan.boundaries[k - 1][1]
        spans = []
        for j in range(1, horizons + 1):
            span = horizon_window(it.plan, k, j, T)
            spans.append(span)
            if span is not None:
                end = max(end, span[1])
        nums.append(it.num[:end])
        cats.append(it.cat[:end])
        stats.append(np.repeat(it.static[None, :], end, axis=0))
        row = []
        for lo, hi in it.plan.boundaries[:k]:
            row.append(len(windows))
            windows.append((offset + lo, offset + hi))
        ctx.append(row)
        frow, okrow = [], []
        for span in spans:
            if span is None:
                frow.append(0)
                okrow.append(False)
            else:
                frow.append(len(windows))
                okrow.append(True)
                windows.append((offset + span[0], offset + span[1]))
        fut.append(frow)
        fut_ok.append(okrow)
        offset += end
    lmax = max(hi - lo for lo, hi in windows)
    win_idx = np.zeros((len(windows), lmax), dtype=np.int64)
    win_mask = np.zeros((len(windows), lmax), dtype=bool)
    for w, (lo, hi) in enumerate(windows):
        win_idx[w, : hi - lo] = np.arange(lo, hi)
        win_mask[w, : hi - lo] = True
    kmax = max(len(r) for r in ctx)
    ctx_win = np.zeros((len(items), kmax), dtype=np.int64)
    ctx_mask = np.zeros((len(items), kmax), dtype=bool)
    for b, row in enumerate(ctx):
        ctx_win[b, : len(row)] = row
        ctx_mask[b, : len(row)] = True
    return PackedBatch(
        num=np.concatenate(nums).astype(dtype),
        cat=np.concatenate(cats),
        static=np.concatenate(stats).astype(dtype),
        win_idx=win_idx,
        win_mask=win_mask,
        ctx_win=ctx_win,
        ctx_mask=ctx_mask,
        fut_win=np.array(fut, dtype=np.int64).reshape(len(items), horizons),
        fut_valid=np.array(fut_ok, dtype=bool).reshape(len(items), horizons),
        party_ids=[it.party_id for it in items],
    )


# --- the encoder --------------------------------------------------------------------


@dataclass
class ForwardState:
    summaries: np.ndarray  # [W, d_h] final short-term state per window
    H2: np.ndarray  # [B, Kmax, d_h]
    context: np.ndarray  # [B, d_h]
    selection: np.ndarray  # [N, M]
    caches: dict


class Encoder:
    """Learned parameters plus forward/backward passes of the sequence encoder."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, nm.Param] = {}
        self._init(np.random.default_rng(seed))

    # parameters ---------------------------------------------------------------

    def _add(self, name, value, decay=True):
        self.params[name] = nm.Param(name, np.ascontiguousarray(value, dtype=self.config.dtype), decay)

    def _init(self, rng):
        cfg = self.config
        M, d_e, d_h, hid = cfg.n_variables, cfg.d_e, cfg.d_h, cfg.grn_hidden

        def uni(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, shape)

        for name, vocab in cfg.categorical:
            self._add(f"embed.{name}", uni((vocab, d_e), 1))
        n_num = len(cfg.numeric_names)
        self._add("proj.w", uni((n_num, d_e), 1))
        self._add("proj.b", np.zeros((n_num, d_e)), decay=False)
        self._add("vsn.var.w2", uni((M, hid, d_e), d_e))
        self._add("vsn.var.b2", np.zeros((M, hid)), decay=False)
        self._add("vsn.var.w1", uni((M, 2 * d_e, hid), hid))
        self._add("vsn.var.b1", np.zeros((M, 2 * d_e)), decay=False)
        self._add("vsn.var.gamma", np.ones((M, d_e)), decay=False)
        self._add("vsn.var.beta", np.zeros((M, d_e)), decay=False)
        self._add("vsn.sel.w2", uni((hid, M * d_e), M * d_e))
        self._add("vsn.sel.b2", np.zeros(hid), decay=False)
        if cfg.static_context:
            self._add("vsn.sel.w3", uni((hid, d_e), d_e))
            self._add("static.w", uni((d_e, cfg.n_static), cfg.n_static))
            self._add("static.b", np.zeros(d_e), decay=False)
        self._add("vsn.sel.w1", uni((2 * M, hid), hid))
        self._add("vsn.sel.b1", np.zeros(2 * M), decay=False)
        self._add("vsn.sel.skip", uni((M, M * d_e), M * d_e))
        self._add("vsn.sel.gamma", np.ones(M), decay=False)
        self._add("vsn.sel.beta", np.zeros(M), decay=False)
        for name, d_in in (("enc1", d_e), ("enc2", d_h)):
            cell = nm.LSTMCellParams.init(d_in, d_h, rng)
            self._add(f"{name}.wx", cell.input_weights)
            self._add(f"{name}.wh", cell.hidden_weights)
            self._add(f"{name}.b", cell.bias, decay=False)
        if cfg.context_mode == "attention":
            for w in ("wq", "wk", "wv", "wo"):
                self._add(f"attn.{w}", uni((d_h, d_h), d_h))
        for k in range(1, cfg.horizons + 1):
            self._add(f"head.{k}", uni((d_h, d_h), d_h))

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _group(self, prefix):
        n = len(prefix)
        return {k[n:]: p.value for k, p in self.params.items() if k.startswith(prefix)}

    def _acc(self, prefix, grads):
        for k, g in grads.items():
            self.params[prefix + k].grad += g

    def cell(self, name) -> nm.LSTMCellParams:
        p = self.params
        return nm.LSTMCellParams(p[f"{name}.wx"].value, p[f"{name}.wh"].value, p[f"{name}.b"].value)

    # event encoding and variable selection ---------------------------------------

    def static_context(self, static):
        if not self.config.static_context:
            return None
        return nm.linear(static, self.params["static.w"].value, self.params["static.b"].value)

    def embed_variables(self, num, cat):
        """Per-variable input embeddings phi[N, M, d_e] before the per-variable GRNs."""
        cfg = self.config
        parts = [num[:, :, None] * self.params["proj.w"].value + self.params["proj.b"].value]
        for j, (name, vocab) in enumerate(cfg.categorical):
            idx = cat[:, j]
            if idx.size and (idx.min() < 0 or idx.max() >= vocab):
                bad = int(idx[(idx < 0) | (idx >= vocab)][0])
                raise IndexError(f"{name} index {bad} outside vocabulary of size {vocab}")
            parts.append(self.params[f"embed.{name}"].value[idx][:, None, :])
        return np.concatenate(parts, axis=1)

    def transform_variables(self, num, cat):
        """Xi[N, M, d_e]: each variable embedded and passed through its own GRN."""
        phi = self.embed_variables(num, cat)
        Xi, c_var = grn(phi, None, self._group("vsn.var."))
        return Xi, (num, cat, c_var)

    def select(self, Xi, cs=None):
        """Selection weights v[N, M] and the weighted representation xi[N, d_e]."""
        N = Xi.shape[0]
        logits, c_sel = grn(Xi.reshape(N, -1), cs, self._group("vsn.sel."))
        v, c_sm = nm.softmax(logits)
        xi = np.einsum("nm,nmd->nd", v, Xi)
        return xi, v, (Xi, c_sel, c_sm, v)

    def encode_events(self, num, cat, static=None):
        Xi, c_t = self.transform_variables(num, cat)
        cs = self.static_context(static) if static is not None else None
        xi, v, c_s = self.select(Xi, cs)
        return xi, v, (c_t, c_s, static)

    def encode_events_backward(self, dxi, cache):
        (num, cat, c_var), (Xi, c_sel, c_sm, v), static = cache
        N, M, d_e = Xi.shape
        dv = np.einsum("nd,nmd->nm", dxi, Xi)
        dXi = v[:, :, None] * dxi[:, None, :]
        dlogits = nm.softmax_backward(dv, c_sm)
        dflat, dcs, g = grn_backward(dlogits, c_sel, self._group("vsn.sel."))
        self._acc("vsn.sel.", g)
        if dcs is not None:
            gw = dcs.T @ static
            self.params["static.w"].grad += gw
            self.params["static.b"].grad += dcs.sum(axis=0)
        dXi += dflat.reshape(N, M, d_e)
        dphi, _, g = grn_backward(dXi, c_var, self._group("vsn.var."))
        self._acc("vsn.var.", g)
        n_num = num.shape[1]
        dproj = dphi[:, :n_num]
        self.params["proj.w"].grad += np.einsum("nid,ni->id", dproj, num)
        self.params["proj.b"].grad += dproj.sum(axis=0)
        for j, (name, _) in enumerate(self.config.categorical):
            np.add.at(self.params[f"embed.{name}"].grad, cat[:, j], dphi[:, n_num + j])

    # context ---------------------------------------------------------------------

    def context(self, H2, mask, last):
        if self.config.context_mode == "last":
            return last, None
        p = self._group("attn.")
        nh = self.config.n_heads
        B, K, d = H2.shape
        dk = d // nh
        q = (last @ p["wq"].T).reshape(B, nh, dk)
        keys = (H2 @ p["wk"].T).reshape(B, K, nh, dk)
        vals = (H2 @ p["wv"].T).reshape(B, K, nh, dk)
        scores = np.einsum("bhd,bkhd->bhk", q, keys) / math.sqrt(dk)
        scores = np.where(mask[:, None, :], scores, -np.inf)
        att, c_sm = nm.softmax(scores)
        o = np.einsum("bhk,bkhd->bhd", att, vals).reshape(B, d)
        return o @ p["wo"].T, (H2, last, q, keys, vals, att, c_sm, o)

    def context_backward(self, dc, cache):
        """Returns (dH2, dlast)."""
        if cache is None:
            return None, dc
        H2, last, q, keys, vals, att, c_sm, o = cache
        p = self._group("attn.")
        B, K, d = H2.shape
        nh = self.config.n_heads
        dk = d // nh
        g = {"wo": dc.T @ o}
        do = (dc @ p["wo"]).reshape(B, nh, dk)
        datt = np.einsum("bhd,bkhd->bhk", do, vals)
        dvals = np.einsum("bhk,bhd->bkhd", att, do).reshape(B, K, d)
        dscores = nm.softmax_backward(datt, c_sm) / math.sqrt(dk)
        dq = np.einsum("bhk,bkhd->bhd", dscores, keys).reshape(B, d)
        dkeys = np.einsum("bhk,bhd->bkhd", dscores, q).reshape(B, K, d)
        flatH = H2.reshape(-1, d)
        g["wq"] = dq.T @ last
        g["wk"] = dkeys.reshape(-1, d).T @ flatH
        g["wv"] = dvals.reshape(-1, d).T @ flatH
        self._acc("attn.", g)
        dH2 = dkeys @ p["wk"] + dvals @ p["wv"]
        return dH2, dq @ p["wq"]

    # full pass ----------------------------------------------------------------------

    def forward(self, batch: PackedBatch, checked: bool | None = None) -> ForwardState:
        if checked is None:
            checked = self.config.precision == "float64"
        xi, v, c_ev = self.encode_events(batch.num, batch.cat,
                                         batch.static if self.config.static_context else None)
        X1 = xi[batch.win_idx]
        _, summaries, c_enc1 = lstm_scan(X1, batch.win_mask, self.cell("enc1"))
        X2 = summaries[batch.ctx_win]
        H2, last, c_enc2 = lstm_scan(X2, batch.ctx_mask, self.cell("enc2"))
        context, c_ctx = self.context(H2, batch.ctx_mask, last)
        if checked:
            nm.check_finite(context, "context vectors")
        return ForwardState(summaries, H2, context, v,
                            {"events": c_ev, "enc1": c_enc1, "enc2": c_enc2, "ctx": c_ctx,
                             "n_events": xi.shape[0]})

    def backward(self, batch: PackedBatch, state: ForwardState, dsummaries, dcontext):
        """Accumulate parameter gradients from d(loss)/d(summaries) and d(loss)/d(context)."""
        c = state.caches
        dsummaries = np.array(dsummaries, copy=True)
        dH2, dlast = self.context_backward(dcontext, c["ctx"])
        if dH2 is None:
            dH2 = np.zeros_like(state.H2)
        dH2[:, -1] += dlast
        dX2, g = lstm_scan_backward(dH2, c["enc2"], self.cell("enc2"))
        self._acc("enc2.", g)
        m = batch.ctx_mask
        np.add.at(dsummaries, batch.ctx_win[m], dX2[m])
        dH1 = np.zeros(batch.win_mask.shape + (self.config.d_h,), dtype=dsummaries.dtype)
        dH1[:, -1] = dsummaries
        dX1, g = lstm_scan_backward(dH1, c["enc1"], self.cell("enc1"))
        self._acc("enc1.", g)
        dxi = np.zeros((c["n_events"], self.config.d_e), dtype=dX1.dtype)
        m = batch.win_mask
        np.add.at(dxi, batch.win_idx[m], dX1[m])
        self.encode_events_backward(dxi, c["events"])

    # single-item conveniences -----------------------------------------------------

    def encode_local(self, xi_window):
        """Short-term scan over one window of selected representations [L, d_e]."""
        xi_window = np.asarray(xi_window, dtype=self.config.dtype)
        if xi_window.shape[0] < 1:
            raise ValueError("empty window")
        H, last, _ = lstm_scan(xi_window[None], np.ones((1, xi_window.shape[0]), bool), self.cell("enc1"))
        return H[0], last[0]

    def encode_global(self, summaries):
        """Long-term scan over sub-sequence summaries [K, d_h]; returns all K states."""
        summaries = np.asarray(summaries, dtype=self.config.dtype)
        if summaries.shape[0] < 1:
            raise ValueError("no sub-sequence summaries")
        H, _, _ = lstm_scan(summaries[None], np.ones((1, summaries.shape[0]), bool), self.cell("enc2"))
        return H[0]

    def context_vector(self, h2_prefix):
        """Context from long-term states of sub-sequences 1..k."""
        h2_prefix = np.asarray(h2_prefix, dtype=self.config.dtype)
        if h2_prefix.shape[0] < 1:
            raise ValueError("empty prefix")
        c, _ = self.context(h2_prefix[None], np.ones((1, h2_prefix.shape[0]), bool), h2_prefix[None, -1])
        return c[0]

    def predict_future(self, c, k: int):
        if not 1 <= k <= self.config.horizons:
            raise ValueError(f"horizon {k} outside 1..{self.config.horizons}")
        return self.params[f"head.{k}"].value @ c


def encode_event(event, schema: FeatureSchema, encoder: Encoder) -> np.ndarray:
    """Per-variable transformed embeddings Xi_t [M, d_e] of one event."""
    seq = PartySequence(event.party_id, [event])
    num, cat = event_arrays(seq, schema)
    Xi, _ = encoder.transform_variables(num.astype(encoder.config.dtype), cat)
    return Xi[0]


def variable_select(Xi_t, encoder: Encoder, c_s=None):
    """Returns (xi_t [d_e], v_t [M]) for one event's transformed embeddings."""
    xi, v, _ = encoder.select(np.asarray(Xi_t, dtype=encoder.config.dtype)[None],
                              None if c_s is None else np.asarray(c_s)[None])
    return xi[0], v[0]


@dataclass
class Embedding:
    party_id: str
    vector: np.ndarray


def embed_batch(encoder: Encoder, items: Sequence[PartyTensors], chunk: int = 256) -> np.ndarray:
    """Context vectors over the full history of each party, in input order."""
    out = []
    for i in range(0, len(items), chunk):
        batch = pack(items[i:i + chunk], dtype=encoder.config.dtype)
        out.append(encoder.forward(batch).context)
    return np.concatenate(out) if out else np.zeros((0, encoder.config.d_h))


def embed_party(seq: PartySequence, schema: FeatureSchema, encoder: Encoder) -> Embedding:
    items = prepare([seq], schema, encoder.config.k_global, encoder.config.local_window)
    return Embedding(seq.party_id, embed_batch(encoder, items)[0])


def window_encodings(encoder: Encoder, items: Sequence[PartyTensors], chunk: int = 256) -> list[np.ndarray]:
    """Short-term encodings [K, d_h] of every history sub-sequence per party."""
    out = []
    for i in range(0, len(items), chunk):
        part = items[i:i + chunk]
        batch = pack(part, dtype=encoder.config.dtype)
        state = encoder.forward(batch)
        for b in range(len(part)):
            out.append(state.summaries[batch.ctx_win[b, batch.ctx_mask[b]]])
    return out
