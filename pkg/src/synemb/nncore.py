"""Dense float64 layers with hand-written backward passes, plus Adam.

Every ``*_forward`` returns its output together with a cache object that the
matching ``*_backward`` consumes. Arrays are plain ``numpy.ndarray`` of dtype
float64; sequence tensors are time-major ``[T, B, F]``.

LSTM gate layout along the ``4H`` axis is ``input, forget, candidate, output``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from synemb import SynEmbError

DTYPE = np.float64
_DEBUG = False


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """When on, every public layer call asserts its outputs are finite."""
    global _DEBUG
    _DEBUG = bool(flag)


def _check(op: str, *arrays) -> None:
    if _DEBUG:
        for a in arrays:
            if a is not None and not np.all(np.isfinite(a)):
                raise NonFiniteError(f"{op} produced non-finite values")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    adam_m: np.ndarray = field(default=None, repr=False)
    adam_v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        for attr in ("grad", "adam_m", "adam_v"):
            arr = getattr(self, attr)
            if arr is None:
                setattr(self, attr, np.zeros_like(self.value))
            elif arr.shape != self.value.shape:
                raise ValueError(f"{self.name}: {attr} shape {arr.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape


class ParamSet(dict):
    """Name -> Param mapping with helpers for gradients and optimizer state."""

    def add(self, name: str, value) -> Param:
        if name in self:
            raise SynEmbError(f"duplicate parameter name {name!r}")
        p = Param(name, value)
        self[name] = p
        return p

    def v(self, name: str) -> np.ndarray:
        return self[name].value

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad.fill(0.0)

    def reset_adam(self) -> None:
        for p in self.values():
            p.adam_m.fill(0.0)
            p.adam_v.fill(0.0)

    def num_values(self) -> int:
        return sum(p.value.size for p in self.values())

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in self.values())))

    def copy(self) -> ParamSet:
        out = ParamSet()
        for name, p in self.items():
            out[name] = Param(name, p.value.copy(), p.grad.copy(), p.adam_m.copy(), p.adam_v.copy())
        return out


# ---------------------------------------------------------------- dense maps

def linear_forward(x, W, b=None):
    y = x @ W
    if b is not None:
        y = y + b
    _check("linear_forward", y)
    return y, x


def linear_backward(dy, cache, W):
    x = cache
    dx = dy @ W.T
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dW, db


def embedding_forward(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return table[ids], ids


def embedding_backward(dout, ids, num_rows):
    dtable = np.zeros((num_rows, dout.shape[-1]), dtype=DTYPE)
    np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, dout.shape[-1]))
    return dtable


# ---------------------------------------------------------------- LSTM

class LSTMWeights(NamedTuple):
    W_ih: np.ndarray  # [I, 4H]
    W_hh: np.ndarray  # [H, 4H]
    b: np.ndarray  # [4H]

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[0]


class LSTMGrads(NamedTuple):
    W_ih: np.ndarray
    W_hh: np.ndarray
    b: np.ndarray


def init_lstm(rng, input_size: int, hidden: int, forget_bias: float = 1.0) -> LSTMWeights:
    bound = 1.0 / np.sqrt(hidden)
    W_ih = rng.uniform(-bound, bound, size=(input_size, 4 * hidden))
    W_hh = rng.uniform(-bound, bound, size=(hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = forget_bias
    return LSTMWeights(W_ih, W_hh, b)


def _check_cell_shapes(x, h_prev, c_prev, w: LSTMWeights):
    H = w.hidden
    if x.ndim != 2 or x.shape[1] != w.W_ih.shape[0]:
        raise SynEmbError(f"LSTM input shape {x.shape} does not match W_ih shape {w.W_ih.shape}")
    if h_prev.shape != (x.shape[0], H):
        raise SynEmbError(f"LSTM h_prev shape {h_prev.shape} does not match expected {(x.shape[0], H)}")
    if c_prev.shape != h_prev.shape:
        raise SynEmbError(f"LSTM c_prev shape {c_prev.shape} does not match h_prev shape {h_prev.shape}")
    if w.W_ih.shape[1] != 4 * H or w.b.shape != (4 * H,):
        raise SynEmbError(f"inconsistent LSTM weights: W_ih {w.W_ih.shape}, W_hh {w.W_hh.shape}, b {w.b.shape}")


def _gates(z, H):
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:])
    return i, f, g, o


def lstm_cell_forward(x, h_prev, c_prev, w: LSTMWeights):
    """One LSTM step on a batch. Returns ``(h, c, cache)``."""
    _check_cell_shapes(x, h_prev, c_prev, w)
    H = w.hidden
    z = x @ w.W_ih + h_prev @ w.W_hh + w.b
    i, f, g, o = _gates(z, H)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    _check("lstm_cell_forward", h, c)
    return h, c, (x, h_prev, c_prev, i, f, g, o, tc)


def _cell_dz(dh, dc, c_prev, i, f, g, o, tc):
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [dc * g * i * (1.0 - i), dc * c_prev * f * (1.0 - f), dc * i * (1.0 - g * g), dh * tc * o * (1.0 - o)],
        axis=1,
    )
    return dz, dc * f


def lstm_cell_backward(dh, dc, cache, w: LSTMWeights):
    """Returns ``(dx, dh_prev, dc_prev, LSTMGrads)``."""
    x, h_prev, c_prev, i, f, g, o, tc = cache
    dz, dc_prev = _cell_dz(dh, dc, c_prev, i, f, g, o, tc)
    dx = dz @ w.W_ih.T
    dh_prev = dz @ w.W_hh.T
    grads = LSTMGrads(x.T @ dz, h_prev.T @ dz, dz.sum(axis=0))
    _check("lstm_cell_backward", dx, dh_prev, dc_prev)
    return dx, dh_prev, dc_prev, grads


def length_mask(lengths, T: int) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size and lengths.min() < 1:
        raise SynEmbError(f"zero-length sequence in batch (lengths {lengths.tolist()})")
    if lengths.size and lengths.max() > T:
        raise SynEmbError(f"length {int(lengths.max())} exceeds padded size {T}")
    return (np.arange(T)[:, None] < lengths[None, :]).astype(DTYPE)


def lstm_forward(x_seq, w: LSTMWeights, h0=None, c0=None, mask=None, reverse: bool = False):
    """Run one LSTM direction over ``x_seq[T, B, I]``.

    Masked positions (mask 0) leave the state untouched and emit zeros, so for
    right-padded batches the returned final state is the state after the last
    valid token in either direction.
    Returns ``(out[T, B, H], (h_last, c_last), cache)``.
    """
    T, B, _ = x_seq.shape
    H = w.hidden
    h = np.zeros((B, H)) if h0 is None else h0
    c = np.zeros((B, H)) if c0 is None else c0
    _check_cell_shapes(x_seq[0], h, c, w)
    xw = (x_seq.reshape(T * B, -1) @ w.W_ih).reshape(T, B, 4 * H) + w.b
    out = np.zeros((T, B, H))
    steps = []
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        z = xw[t] + h @ w.W_hh
        i, f, g, o = _gates(z, H)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        steps.append((t, h, c, i, f, g, o, tc))
        if mask is None:
            h, c = h_new, c_new
            out[t] = h_new
        else:
            m = mask[t][:, None]
            h = m * h_new + (1.0 - m) * h
            c = m * c_new + (1.0 - m) * c
            out[t] = m * h_new
    _check("lstm_forward", out, h, c)
    return out, (h, c), (x_seq, w, mask, steps)


def lstm_backward(dout, dh_last, dc_last, cache):
    """Returns ``(dx_seq, dh0, dc0, LSTMGrads)``."""
    x_seq, w, mask, steps = cache
    T, B, _ = x_seq.shape
    H = w.hidden
    dh = np.zeros((B, H)) if dh_last is None else dh_last.copy()
    dc = np.zeros((B, H)) if dc_last is None else dc_last.copy()
    dz_all = np.zeros((T, B, 4 * H))
    h_prev_all = np.zeros((T, B, H))
    for t, h_prev, c_prev, i, f, g, o, tc in reversed(steps):
        if mask is None:
            dz, dc_prev = _cell_dz(dh + dout[t], dc, c_prev, i, f, g, o, tc)
            dh = dz @ w.W_hh.T
            dc = dc_prev
        else:
            m = mask[t][:, None]
            dz, dc_prev = _cell_dz(m * (dh + dout[t]), m * dc, c_prev, i, f, g, o, tc)
            dh = dz @ w.W_hh.T + (1.0 - m) * dh
            dc = dc_prev + (1.0 - m) * dc
        dz_all[t] = dz
        h_prev_all[t] = h_prev
    dz2 = dz_all.reshape(T * B, 4 * H)
    dx = (dz2 @ w.W_ih.T).reshape(x_seq.shape)
    grads = LSTMGrads(
        x_seq.reshape(T * B, -1).T @ dz2,
        h_prev_all.reshape(T * B, H).T @ dz2,
        dz2.sum(axis=0),
    )
    _check("lstm_backward", dx, dh, dc)
    return dx, dh, dc, grads


def bilstm_layer_forward(x_seq, lengths, w_fwd: LSTMWeights, w_bwd: LSTMWeights):
    """Bidirectional layer over right-padded ``x_seq[T, B, I]``.

    Returns ``(out[T, B, Hf + Hb], finals, cache)`` where ``finals`` is
    ``(h_fwd, c_fwd, h_bwd, c_bwd)``: the forward state at position
    ``length - 1`` and the backward state at position 0.
    """
    mask = length_mask(lengths, x_seq.shape[0])
    out_f, (h_f, c_f), cache_f = lstm_forward(x_seq, w_fwd, mask=mask)
    out_b, (h_b, c_b), cache_b = lstm_forward(x_seq, w_bwd, mask=mask, reverse=True)
    out = np.concatenate([out_f, out_b], axis=2)
    return out, (h_f, c_f, h_b, c_b), (cache_f, cache_b, w_fwd.hidden)


def bilstm_layer_backward(dout, dfinals, cache):
    """``dfinals`` mirrors ``finals`` (entries may be None). Returns ``(dx, grads_fwd, grads_bwd)``."""
    cache_f, cache_b, Hf = cache
    dh_f, dc_f, dh_b, dc_b = dfinals if dfinals is not None else (None,) * 4
    dx_f, _, _, g_f = lstm_backward(dout[:, :, :Hf], dh_f, dc_f, cache_f)
    dx_b, _, _, g_b = lstm_backward(dout[:, :, Hf:], dh_b, dc_b, cache_b)
    return dx_f + dx_b, g_f, g_b


# ---------------------------------------------------------------- pooling, dropout, loss

def masked_temporal_max_pool(x_seq, lengths):
    """Max over valid timesteps per batch item. Returns ``(pooled[B, F], cache)``."""
    T, B, F = x_seq.shape
    mask = length_mask(lengths, T)
    masked = np.where(mask[:, :, None] > 0, x_seq, -np.inf)
    idx = np.argmax(masked, axis=0)  # first occurrence wins ties
    pooled = np.take_along_axis(x_seq, idx[None], axis=0)[0]
    _check("masked_temporal_max_pool", pooled)
    return pooled, (idx, x_seq.shape)


def masked_temporal_max_pool_backward(dpooled, cache):
    idx, shape = cache
    dx = np.zeros(shape)
    np.put_along_axis(dx, idx[None], dpooled[None], axis=0)
    return dx


def dropout_forward(x, p: float, training: bool, rng):
    """Inverted dropout. Returns ``(y, mask)``; the mask already carries the 1/(1-p) scale."""
    if not 0.0 <= p < 1.0:
        raise SynEmbError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, np.ones_like(x)
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy * mask


def softmax_cross_entropy(logits, targets, ignore_id: int | None = None):
    """Mean negative log-likelihood over rows whose target is not ``ignore_id``.

    Returns ``(loss, dlogits)``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    targets = np.asarray(targets, dtype=np.int64)
    N, C = logits.shape
    keep = np.ones(N, dtype=bool) if ignore_id is None else targets != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise SynEmbError("empty loss: every target row is ignored")
    if np.any((targets[keep] < 0) | (targets[keep] >= C)):
        raise SynEmbError(f"target id outside [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.flatnonzero(keep)
    loss = -logp[rows, targets[rows]].sum() / n
    grad = np.exp(logp)
    grad[rows, targets[rows]] -= 1.0
    grad[~keep] = 0.0
    grad /= n
    _check("softmax_cross_entropy", grad)
    return float(loss), grad


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise SynEmbError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise SynEmbError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm`` (0 disables). Returns the pre-clip norm."""
    norm = params.grad_norm()
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            p.grad *= scale
    return norm


def adam_step(params, config: AdamConfig, frozen=()) -> None:
    """Bias-corrected Adam update; zeroes every gradient afterwards."""
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    for p in plist:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")
    config.step_count += 1
    t = config.step_count
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p in plist:
        if p.name not in frozen:
            p.adam_m *= b1
            p.adam_m += (1.0 - b1) * p.grad
            p.adam_v *= b2
            p.adam_v += (1.0 - b2) * (p.grad * p.grad)
            m_hat = p.adam_m / bc1
            v_hat = p.adam_v / bc2
            p.value -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        p.grad.fill(0.0)


# ---------------------------------------------------------------- gradient checking

def numerical_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        fp = f()
        flat[k] = old - eps
        fm = f()
        flat[k] = old
        gflat[k] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b) -> float:
    """``|a - b| / max(|a| + |b|, 1e-12)`` in the L2 norm."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))
