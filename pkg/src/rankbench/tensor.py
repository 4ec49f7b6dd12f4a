"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operators the rankers need: matmul, bias add, relu, tanh, 1-d
convolution (same padding), max pooling, hadamard, concat, mean, inverted
dropout, embedding lookup, and a numerically stable pairwise logistic loss.
A Tape records operations in execution order; backward replays it in reverse,
accumulating gradients across fan-out.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np


class ShapeError(ValueError):
    """Operator applied to incompatible shapes."""


class Tensor:
    """Dense float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "tracked")

    def __init__(self, data, requires_grad: bool = False, tracked: bool | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # gradients flow to this tensor iff it, or an ancestor, requires them
        self.tracked = requires_grad if tracked is None else tracked

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tape:
    """Ordered record of recorded operations for reverse traversal."""

    def __init__(self):
        self._records: list = []

    def record(self, backward_fn) -> None:
        self._records.append(backward_fn)

    def __len__(self) -> int:
        return len(self._records)

    def backward_all(self) -> None:
        for fn in reversed(self._records):
            fn()


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad for every tracked tensor reachable from loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    tape.backward_all()


def _out(tape: Tape | None, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn=None) -> Tensor:
    tracked = any(t.tracked for t in inputs)
    out = Tensor(data, tracked=tracked)
    if tape is not None and tracked and backward_fn is not None:
        tape.record(backward_fn(out))
    return out


# -- forward operators -------------------------------------------------------

def matmul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def make_backward(out):
        def fn():
            g = out.grad
            if g is None:
                return
            ad, bd = a.data, b.data
            if a.tracked:
                if ad.ndim == 1 and bd.ndim == 2:
                    _accum(a, g @ bd.T)
                elif ad.ndim == 2 and bd.ndim == 1:
                    _accum(a, np.outer(g, bd))
                else:
                    _accum(a, g @ bd.T)
            if b.tracked:
                if ad.ndim == 1 and bd.ndim == 2:
                    _accum(b, np.outer(ad, g))
                elif ad.ndim == 2 and bd.ndim == 1:
                    _accum(b, ad.T @ g)
                else:
                    _accum(b, ad.T @ g)
        return fn

    return _out(tape, data, (a, b), make_backward)


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may be 1-d and broadcast over the rows of a 2-d a."""
    bias_broadcast = a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]
    if not bias_broadcast and a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes differ {a.shape} + {b.shape}")
    data = a.data + b.data

    def make_backward(out):
        def fn():
            g = out.grad
            if g is None:
                return
            if a.tracked:
                _accum(a, g)
            if b.tracked:
                _accum(b, g.sum(axis=0) if bias_broadcast else g)
        return fn

    return _out(tape, data, (a, b), make_backward)


add_bias = add


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def make_backward(out):
        gate = (x.data > 0.0).astype(np.float64)

        def fn():
            if out.grad is not None and x.tracked:
                _accum(x, out.grad * gate)
        return fn

    return _out(tape, data, (x,), make_backward)


def tanh(tape: Tape | None, x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def make_backward(out):
        def fn():
            if out.grad is not None and x.tracked:
                _accum(x, out.grad * (1.0 - out.data ** 2))
        return fn

    return _out(tape, data, (x,), make_backward)


def conv1d(tape: Tape | None, x: Tensor, kernel: Tensor) -> Tensor:
    """Same-padded 1-d convolution: x (L, Cin), kernel (w, Cin, Cout) -> (L, Cout)."""
    if x.data.ndim != 2 or kernel.data.ndim != 3:
        raise ShapeError(f"conv1d: need x (L,Cin) and kernel (w,Cin,Cout), got {x.shape}, {kernel.shape}")
    length, c_in = x.data.shape
    width, kc_in, c_out = kernel.data.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d: channel mismatch x {x.shape} vs kernel {kernel.shape}")
    left = (width - 1) // 2
    right = width - 1 - left
    padded = np.zeros((length + width - 1, c_in))
    padded[left:left + length] = x.data
    cols = np.lib.stride_tricks.sliding_window_view(padded, width, axis=0)  # (L, Cin, w)
    cols = cols.transpose(0, 2, 1).reshape(length, width * c_in)
    k2 = kernel.data.reshape(width * c_in, c_out)
    data = cols @ k2

    def make_backward(out):
        def fn():
            g = out.grad
            if g is None:
                return
            if kernel.tracked:
                _accum(kernel, (cols.T @ g).reshape(width, c_in, c_out))
            if x.tracked:
                dcols = (g @ k2.T).reshape(length, width, c_in)
                dpad = np.zeros_like(padded)
                for j in range(width):
                    dpad[j:j + length] += dcols[:, j, :]
                _accum(x, dpad[left:left + length])
        return fn

    return _out(tape, data, (x, kernel), make_backward)


def max_pool_1d(tape: Tape | None, x: Tensor, window: int, stride: int) -> Tensor:
    """Valid max pooling over axis 0 of a (L,) or (L, C) tensor."""
    if window < 1 or stride < 1:
        raise ShapeError(f"max_pool_1d: window={window}, stride={stride} must be >= 1")
    length = x.data.shape[0]
    if length < window:
        raise ShapeError(f"max_pool_1d: input length {length} < window {window}")
    starts = np.arange(0, length - window + 1, stride)
    if x.data.ndim == 1:
        windows = x.data[starts[:, None] + np.arange(window)]          # (nw, w)
        arg = windows.argmax(axis=1)
        data = windows[np.arange(len(starts)), arg]

        def make_backward(out):
            def fn():
                if out.grad is None or not x.tracked:
                    return
                dx = np.zeros_like(x.data)
                np.add.at(dx, starts + arg, out.grad)
                _accum(x, dx)
            return fn

    elif x.data.ndim == 2:
        windows = x.data[starts[:, None] + np.arange(window)]          # (nw, w, C)
        arg = windows.argmax(axis=1)                                   # (nw, C)
        data = np.take_along_axis(windows, arg[:, None, :], axis=1)[:, 0, :]
        cols = np.broadcast_to(np.arange(x.data.shape[1]), arg.shape)

        def make_backward(out):
            def fn():
                if out.grad is None or not x.tracked:
                    return
                dx = np.zeros_like(x.data)
                np.add.at(dx, (starts[:, None] + arg, cols), out.grad)
                _accum(x, dx)
            return fn

    else:
        raise ShapeError(f"max_pool_1d: need rank 1 or 2, got {x.shape}")

    return _out(tape, data, (x,), make_backward)


def global_max_pool(tape: Tape | None, x: Tensor) -> Tensor:
    """Max over axis 0: (L, C) -> (C,), or (L,) -> scalar."""
    if x.data.ndim == 1:
        arg = int(x.data.argmax())
        data = x.data[arg]

        def make_backward(out):
            def fn():
                if out.grad is None or not x.tracked:
                    return
                dx = np.zeros_like(x.data)
                dx[arg] = out.grad
                _accum(x, dx)
            return fn

    elif x.data.ndim == 2:
        arg = x.data.argmax(axis=0)
        cols = np.arange(x.data.shape[1])
        data = x.data[arg, cols]

        def make_backward(out):
            def fn():
                if out.grad is None or not x.tracked:
                    return
                dx = np.zeros_like(x.data)
                dx[arg, cols] = out.grad
                _accum(x, dx)
            return fn

    else:
        raise ShapeError(f"global_max_pool: need rank 1 or 2, got {x.shape}")

    return _out(tape, data, (x,), make_backward)


def hadamard(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a 1-d side broadcasts over the rows of a 2-d side."""
    if a.data.shape == b.data.shape:
        broadcast = None
    elif a.data.ndim == 1 and b.data.ndim == 2 and b.data.shape[1] == a.data.shape[0]:
        broadcast = "a"
    elif b.data.ndim == 1 and a.data.ndim == 2 and a.data.shape[1] == b.data.shape[0]:
        broadcast = "b"
    else:
        raise ShapeError(f"hadamard: shapes incompatible {a.shape} * {b.shape}")
    data = a.data * b.data

    def make_backward(out):
        def fn():
            g = out.grad
            if g is None:
                return
            if a.tracked:
                da = g * b.data
                _accum(a, da.sum(axis=0) if broadcast == "a" else da)
            if b.tracked:
                db = g * a.data
                _accum(b, db.sum(axis=0) if broadcast == "b" else db)
        return fn

    return _out(tape, data, (a, b), make_backward)


def concat(tape: Tape | None, tensors: list[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    if any(t.data.ndim != 1 for t in tensors):
        raise ShapeError(f"concat: all inputs must be 1-d, got {[t.shape for t in tensors]}")
    data = np.concatenate([t.data for t in tensors])
    offsets = np.cumsum([0] + [t.data.shape[0] for t in tensors])

    def make_backward(out):
        def fn():
            g = out.grad
            if g is None:
                return
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.tracked:
                    _accum(t, g[lo:hi])
        return fn

    return _out(tape, data, tuple(tensors), make_backward)


def mean(tape: Tape | None, x: Tensor) -> Tensor:
    data = np.asarray(x.data.mean())
    n = x.data.size

    def make_backward(out):
        def fn():
            if out.grad is not None and x.tracked:
                _accum(x, np.full_like(x.data, float(out.grad) / n))
        return fn

    return _out(tape, data, (x,), make_backward)


def dropout(tape: Tape | None, x: Tensor, p: float, mask: np.ndarray) -> Tensor:
    """Inverted dropout: multiply by a supplied 0/1 mask scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p={p} must be in [0, 1)")
    if mask.shape != x.data.shape:
        raise ShapeError(f"dropout: mask shape {mask.shape} != input shape {x.shape}")
    scale = 1.0 / (1.0 - p)
    scaled = mask * scale
    data = x.data * scaled

    def make_backward(out):
        def fn():
            if out.grad is not None and x.tracked:
                _accum(x, out.grad * scaled)
        return fn

    return _out(tape, data, (x,), make_backward)


def make_dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    """Bernoulli(1-p) keep mask as float64 zeros/ones."""
    if p <= 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p).astype(np.float64)


def embedding_lookup(tape: Tape | None, table: Tensor, ids) -> Tensor:
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding_lookup: id out of range for table {table.shape}")
    data = table.data[idx]

    def make_backward(out):
        def fn():
            if out.grad is not None and table.tracked:
                dt = np.zeros_like(table.data)
                np.add.at(dt, idx, out.grad)
                _accum(table, dt)
        return fn

    return _out(tape, data, (table,), make_backward)


def dense(tape: Tape | None, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(tape, matmul(tape, x, w), b)


# -- pairwise logistic (RankNet) loss ----------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def ranknet_loss(tape: Tape | None, s_pos: Tensor, s_neg: Tensor) -> Tensor:
    """Elementwise log(1 + exp(-(s_pos - s_neg))), stable for large gaps."""
    if s_pos.data.shape != s_neg.data.shape:
        raise ShapeError(f"ranknet_loss: shapes differ {s_pos.shape} vs {s_neg.shape}")
    delta = s_pos.data - s_neg.data
    data = np.where(delta >= 0, np.log1p(np.exp(-np.abs(delta))), -delta + np.log1p(np.exp(-np.abs(delta))))

    def make_backward(out):
        def fn():
            g = out.grad
            if g is None:
                return
            s = _sigmoid(-delta)          # d loss / d s_neg
            if s_pos.tracked:
                _accum(s_pos, -g * s)
            if s_neg.tracked:
                _accum(s_neg, g * s)
        return fn

    return _out(tape, data, (s_pos, s_neg), make_backward)


def ranknet_value(s_pos: float, s_neg: float) -> float:
    """Scalar pairwise logistic loss on plain floats."""
    delta = s_pos - s_neg
    if delta >= 0:
        return math.log1p(math.exp(-delta))
    return -delta + math.log1p(math.exp(delta))


# -- Adam ---------------------------------------------------------------------

class AdamState:
    """Bias-corrected Adam moments for a fixed parameter list."""

    def __init__(self, lr: float = 0.0001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    """One in-place Adam update; the step counter advances once per call."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params vs {len(grads)} grads")
    if state.m is None:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- checkpoint container ------------------------------------------------------

CHECKPOINT_FORMAT = "rankbench-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """JSON container of named float64 arrays; float repr round-trips exactly."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).reshape(-1).tolist()}
            for name, arr in tensors.items()
        },
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, allow_nan=False)
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a checkpoint file: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    tensors = {}
    for name, entry in payload["tensors"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        tensors[name] = arr
    return tensors, payload.get("meta", {})
