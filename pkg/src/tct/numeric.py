"""Dense numeric primitives with hand-written backward passes.

Every forward function returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.  Arrays may carry arbitrary
leading batch dimensions; the primitive acts on the last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

LAYER_NORM_EPS = 1e-5
RECURRENT_CELL = "lstm"

DTYPES = {"float32": np.float32, "float64": np.float64}


def resolve_dtype(precision: str) -> type:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}") from None


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


@dataclass
class Param:
    """A named learnable tensor with its gradient buffer."""

    name: str
    value: np.ndarray
    decay: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


# --- elementwise -----------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def elu(x):
    out = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
    return out, x


def elu_backward(dout, x):
    return dout * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0)))


def glu(a):
    """First half gated by the sigmoid of the second half (last axis)."""
    if a.shape[-1] % 2:
        raise ValueError(f"glu needs an even last dimension, got {a.shape[-1]}")
    m = a.shape[-1] // 2
    val, gate = a[..., :m], a[..., m:]
    s = sigmoid(gate)
    return val * s, (val, s)


def glu_backward(dout, cache):
    val, s = cache
    return np.concatenate([dout * s, dout * val * s * (1.0 - s)], axis=-1)


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layer_norm_backward(dout, cache):
    """Returns (dx, dgamma, dbeta); dgamma/dbeta are reduced to gamma's shape."""
    xhat, inv, gamma = cache
    dxhat = dout * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    dgamma = reduce_to(dout * xhat, gamma.shape)
    dbeta = reduce_to(dout, gamma.shape)
    return dx, dgamma, dbeta


def softmax(x, temperature=1.0):
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = x / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return s, (s, temperature)


def softmax_backward(dout, cache):
    s, temperature = cache
    return s * (dout - (dout * s).sum(axis=-1, keepdims=True)) / temperature


def logsumexp(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- linear maps -----------------------------------------------------------
# ``W`` is [out, in] for a shared map, or [M, out, in] for M per-variable maps
# applied to x[..., M, in].


def linear(x, W, b=None):
    if W.ndim == 2:
        y = x @ W.T
    else:
        y = np.einsum("...mi,moi->...mo", x, W)
    if b is not None:
        y = y + b
    return y


def linear_backward(dy, x, W, with_bias=True):
    """Returns (dx, dW, db)."""
    if W.ndim == 2:
        dx = dy @ W
        dW = dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    else:
        dx = np.einsum("...mo,moi->...mi", dy, W)
        dW = np.einsum(
            "nmo,nmi->moi",
            dy.reshape((-1,) + dy.shape[-2:]),
            x.reshape((-1,) + x.shape[-2:]),
        )
    db = reduce_to(dy, dy.shape[-(W.ndim - 1):]) if with_bias else None
    return dx, dW, db


# --- recurrent cell ----------------------------------------------------------


@dataclass
class LSTMCellParams:
    """Gate blocks are stacked in the order (input, forget, candidate, output)."""

    input_weights: np.ndarray  # [4*d_h, d_in]
    hidden_weights: np.ndarray  # [4*d_h, d_h]
    bias: np.ndarray  # [4*d_h]

    def __post_init__(self):
        rows = self.input_weights.shape[0]
        if rows % 4 or self.hidden_weights.shape != (rows, rows // 4) or self.bias.shape != (rows,):
            raise ValueError("LSTM parameters must hold exactly 4 gate blocks of size d_h")

    @property
    def hidden_size(self) -> int:
        return self.bias.shape[0] // 4

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator, dtype=np.float64):
        bound = 1.0 / math.sqrt(d_h)
        wx = rng.uniform(-bound, bound, (4 * d_h, d_in))
        wh = rng.uniform(-bound, bound, (4 * d_h, d_h))
        b = rng.uniform(-bound, bound, 4 * d_h)
        b[d_h:2 * d_h] = 1.0
        return cls(wx.astype(dtype), wh.astype(dtype), b.astype(dtype))


def lstm_cell(x, h_prev, c_prev, p: LSTMCellParams):
    d_h = p.hidden_size
    if x.shape[-1] != p.input_weights.shape[1]:
        raise ValueError(f"lstm input has size {x.shape[-1]}, expected {p.input_weights.shape[1]}")
    if h_prev.shape[-1] != d_h or c_prev.shape[-1] != d_h:
        raise ValueError(f"lstm state must have size {d_h}")
    z = x @ p.input_weights.T + h_prev @ p.hidden_weights.T + p.bias
    i = sigmoid(z[..., :d_h])
    f = sigmoid(z[..., d_h:2 * d_h])
    g = np.tanh(z[..., 2 * d_h:3 * d_h])
    o = sigmoid(z[..., 3 * d_h:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return (h, c), (x, h_prev, c_prev, i, f, g, o, tc)


def lstm_cell_backward(dh, dc, cache, p: LSTMCellParams):
    """Returns (dx, dh_prev, dc_prev, dWx, dWh, db)."""
    x, h_prev, c_prev, i, f, g, o, tc = cache
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ],
        axis=-1,
    )
    dx = dz @ p.input_weights
    dh_prev = dz @ p.hidden_weights
    dc_prev = dc * f
    flat = dz.reshape(-1, dz.shape[-1])
    dWx = flat.T @ x.reshape(-1, x.shape[-1])
    dWh = flat.T @ h_prev.reshape(-1, h_prev.shape[-1])
    db = flat.sum(axis=0)
    return dx, dh_prev, dc_prev, dWx, dWh, db


# --- finite-difference oracle ------------------------------------------------


def grad_check(
    fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    *,
    loss_fn: Callable[[Mapping[str, np.ndarray]], float] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
    details: dict | None = None,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn(params)`` returns ``(loss, grads)``; ``loss_fn`` (loss only) is used
    for the perturbed evaluations when given.  Arrays in ``params`` are
    perturbed in place and restored.  With ``max_entries`` a seeded random
    subset of entries is checked per array.  ``details`` (if passed) is filled
    with the worst error per array.  ``floor`` is the smallest denominator of
    the relative error; entries whose gradient sits below the loss's rounding
    noise divided by ``eps`` need a larger floor to be judged meaningfully.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")
    loss_fn = loss_fn or (lambda p: fn(p)[0])
    loss, grads = fn(params)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss at the unperturbed point")
    grads = {k: np.array(v, dtype=np.float64, copy=True) for k, v in grads.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        if arr.size and not np.shares_memory(flat, arr):
            raise ValueError(f"parameter {name} is not contiguous; cannot perturb in place")
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        analytic = grads[name].reshape(-1)
        name_worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            fp = loss_fn(params)
            flat[j] = orig - eps
            fm = loss_fn(params)
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{j}]")
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[j])
            denom = max(abs(a), abs(numeric), floor)
            name_worst = max(name_worst, abs(a - numeric) / denom)
        if details is not None:
            details[name] = name_worst
        worst = max(worst, name_worst)
    return worst
