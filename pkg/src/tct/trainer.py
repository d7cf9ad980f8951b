"""Self-supervised pre-training: AdamW, one-cycle schedule, batching and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cpc import LossReport, cpc_loss, make_batch
from .encoder import Encoder, EncoderConfig, PartyTensors

log = logging.getLogger(__name__)

MAGIC = b"TCT1"


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


# --- optimizer ---------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **kw) -> "OptimState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState,
               lr: float, decay: Mapping[str, bool] | None = None) -> None:
    """One AdamW update in place; decoupled decay only where ``decay[name]`` is true."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}; step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if decay is None or decay[name]:
            theta -= lr * state.weight_decay * theta
        theta -= update


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to global norm <= max_norm; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class LRSchedule:
    total_steps: int
    max_lr: float = 1e-3
    pct_warmup: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __call__(self, step: int) -> float:
        return one_cycle_lr(step, self)


def one_cycle_lr(step: int, sched: LRSchedule) -> float:
    """Cosine warm-up to max_lr over the first pct_warmup of steps, then cosine anneal."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step > sched.total_steps:
        log.warning("step %d beyond schedule end %d; clamping", step, sched.total_steps)
        step = sched.total_steps
    start = sched.max_lr / sched.div_factor
    end = sched.max_lr / sched.final_div_factor
    warm = sched.pct_warmup * sched.total_steps
    if step <= warm and warm > 0:
        return start + (sched.max_lr - start) * (1 - math.cos(math.pi * step / warm)) / 2
    span = sched.total_steps - warm
    frac = (step - warm) / span if span > 0 else 1.0
    return end + (sched.max_lr - end) * (1 + math.cos(math.pi * frac)) / 2


# --- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path: str | Path, encoder: Encoder, state: OptimState | None = None,
                    extra: dict | None = None) -> None:
    """Write magic, manifest length, JSON manifest, then the little-endian payload."""
    cfg = encoder.config
    dtype = np.dtype(cfg.dtype).newbyteorder("<")
    arrays = [(name, p.value) for name, p in encoder.params.items()]
    if state is not None:
        arrays += [(f"adam.m/{k}", v) for k, v in state.m.items()]
        arrays += [(f"adam.v/{k}", v) for k, v in state.v.items()]
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": MAGIC.decode(),
        "fingerprint": cfg.fingerprint(),
        "architecture": cfg.architecture(),
        "dtype": dtype.str,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "params": entries,
        "optimizer": None if state is None else {
            "t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "weight_decay": state.weight_decay},
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True, default=list).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and integrity-check an archive; returns (manifest, arrays)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + n:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(data[8:8 + n])
    payload = data[8 + n:]
    expected = sum(e["nbytes"] for e in manifest["params"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest lists {expected}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    dtype = np.dtype(manifest["dtype"])
    arrays = {}
    for e in manifest["params"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).copy()
    return manifest, arrays


def load_checkpoint(path: str | Path, config: EncoderConfig,
                    with_state: bool = False) -> Encoder | tuple[Encoder, OptimState | None]:
    """Rebuild an encoder for ``config``; refuses archives written for another architecture."""
    manifest, arrays = read_checkpoint(path)
    if manifest["fingerprint"] != config.fingerprint():
        raise CheckpointError(
            f"config fingerprint mismatch: checkpoint {manifest['fingerprint']}, "
            f"current config {config.fingerprint()}")
    encoder = Encoder(config)
    for name, p in encoder.params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if arrays[name].shape != p.value.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape}, expected {p.value.shape}")
        p.value[...] = arrays[name]
    if not with_state:
        return encoder
    state = None
    if manifest["optimizer"] is not None:
        opt = manifest["optimizer"]
        state = OptimState({k: arrays[f"adam.m/{k}"].astype(config.dtype) for k in encoder.params},
                           {k: arrays[f"adam.v/{k}"].astype(config.dtype) for k in encoder.params},
                           **opt)
    return encoder, state


# --- training loop ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 10
    max_lr: float = 1e-3
    weight_decay: float = 1e-2
    tau: float = 0.1
    seed: int = 1
    grad_clip: float = 5.0
    pct_warmup: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    checkpoint: str | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class EpochLog:
    epoch: int
    l_total: float
    l_per_horizon: list[float]
    accuracy: float
    lr_last: float
    steps: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    encoder: Encoder
    state: OptimState
    history: list[EpochLog] = field(default_factory=list)


def _nanmean(rows):
    arr = np.array(rows, dtype=float)
    out = []
    for col in arr.T:
        col = col[~np.isnan(col)]
        out.append(float(col.mean()) if col.size else math.nan)
    return out


def pretrain(items: Sequence[PartyTensors], enc_config: EncoderConfig, cfg: TrainConfig,
             log_path: str | Path | None = None, encoder: Encoder | None = None) -> TrainResult:
    """Contrastive pre-training; one sampled anchor per party per epoch.

    Writes one JSON line per epoch to ``log_path`` and, when
    ``cfg.checkpoint`` is set, a checkpoint after every epoch (so a
    divergence leaves the last good one in place).
    """
    items = list(items)
    batch_size = cfg.batch_size
    if len(items) < batch_size:
        batch_size = max(2, len(items))
        log.warning("only %d eligible parties; batch size reduced to %d", len(items), batch_size)
    if len(items) < 2:
        raise ValueError("pre-training needs at least two eligible parties")
    rng = np.random.default_rng(cfg.seed)
    encoder = encoder or Encoder(enc_config, seed=cfg.seed)
    values = encoder.values()
    decay = {k: p.decay for k, p in encoder.params.items()}
    state = OptimState.zeros_like(values, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(items) / batch_size)
    sched = LRSchedule(steps_per_epoch * cfg.epochs, cfg.max_lr, cfg.pct_warmup,
                       cfg.div_factor, cfg.final_div_factor)
    result = TrainResult(encoder, state)
    log_fh = open(log_path, "w") if log_path else None
    try:
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(items))
            reports: list[LossReport] = []
            lr = sched(step)
            for start in range(0, len(items), batch_size):
                chunk = [items[i] for i in order[start:start + batch_size]]
                if len(chunk) < 2:
                    continue
                batch = make_batch(encoder, chunk, rng)
                encoder.zero_grad()
                lr = sched(step)
                try:
                    report = cpc_loss(encoder, batch, cfg.tau)
                    grads = encoder.grads()
                    clip_grad_norm(grads, cfg.grad_clip)
                    adamw_step(values, grads, state, lr, decay)
                except FloatingPointError as exc:
                    raise TrainingDiverged(
                        f"epoch {epoch} step {step}: {exc}; last good checkpoint: {cfg.checkpoint}") from exc
                reports.append(report)
                step += 1
            weights = [r.n_pairs for r in reports]
            entry = EpochLog(
                epoch=epoch,
                l_total=float(np.average([r.total for r in reports], weights=weights)),
                l_per_horizon=_nanmean([r.per_horizon for r in reports]),
                accuracy=float(np.average([r.accuracy for r in reports], weights=weights)),
                lr_last=lr,
                steps=len(reports),
            )
            result.history.append(entry)
            log.info("epoch %d  loss %.4f  acc %.4f  lr %.2e", epoch, entry.l_total, entry.accuracy, lr)
            if log_fh:
                log_fh.write(entry.to_json() + "\n")
                log_fh.flush()
            if cfg.checkpoint:
                save_checkpoint(cfg.checkpoint, encoder, state, {"epoch": epoch, "train": asdict(cfg)})
    finally:
        if log_fh:
            log_fh.close()
    return result


def evaluate_cpc(encoder: Encoder, items: Sequence[PartyTensors], batch_size: int, tau: float,
                 seed: int = 0) -> LossReport:
    """Loss and accuracy over full batches only (no parameter update)."""
    rng = np.random.default_rng(seed)
    reports = []
    for start in range(0, len(items) - batch_size + 1, batch_size):
        batch = make_batch(encoder, items[start:start + batch_size], rng)
        reports.append(cpc_loss(encoder, batch, tau, backward=False))
    if not reports:
        raise ValueError(f"fewer than {batch_size} parties for a full batch")
    n = [r.n_pairs for r in reports]
    return LossReport(_nanmean([r.per_horizon for r in reports]),
                      float(np.average([r.total for r in reports], weights=n)),
                      float(np.average([r.accuracy for r in reports], weights=n)), int(sum(n)))
