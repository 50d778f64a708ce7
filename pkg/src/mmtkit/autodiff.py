"""Dense tensors with reverse-mode automatic differentiation.

Forward ops compute with numpy; each op appends a record to the active
Tape (when one is open and an input requires grad) holding the local
backward rule.  `backward` replays the records in exact reverse order,
accumulating vector-Jacobian products into `.grad` arrays.  Parameter
grads accumulate across calls; the caller zeroes them between steps.

Broadcasting is restricted to leading batch dimensions: two shapes are
compatible when the shorter one equals the trailing dims of the longer.
Anything else is rejected loudly with the op name and both shapes.

Training runs in float32; gradient checking uses float64 tensors.  All
randomness (dropout masks, initializers) flows through explicitly passed
numpy Generators; the toolkit seeds them with the counter-based Philox
bit generator so masks reproduce across platforms.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes for an op."""


class Tensor:
    """Shape + dense numeric payload; optionally a node on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype == np.float16 or arr.dtype == np.float128:
            raise ValueError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        # True when this tensor is a grad leaf or depends on one.
        self._needs_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tape:
    """Recorded computation: op order in, exact reverse order out."""

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already recording on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from loss."""
    if loss.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    _accum(loss, np.ones((), dtype=loss.dtype))
    for out, backward_fn in reversed(tape._records):
        g = out.grad
        if g is None:
            continue
        backward_fn(g)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _maybe_record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t._needs_grad for t in inputs):
        out._needs_grad = True
        tape.record(out, backward_fn)
    return out


def _check_leading(op: str, a: np.ndarray, b: np.ndarray) -> None:
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.ndim and big.shape[big.ndim - small.ndim :] != small.shape:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} differ beyond leading batch dims"
        )


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_leading("add", a.data, b.data)
    out = Tensor(a.data + b.data)

    def bw(g):
        if a._needs_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b._needs_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _maybe_record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_leading("sub", a.data, b.data)
    out = Tensor(a.data - b.data)

    def bw(g):
        if a._needs_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b._needs_grad:
            _accum(b, -_unbroadcast(g, b.shape))

    return _maybe_record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_leading("mul", a.data, b.data)
    out = Tensor(a.data * b.data)

    def bw(g):
        if a._needs_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b._needs_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _maybe_record(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Matrix product; operands of rank > 2 are stacks over leading dims.

    Leading dims must match exactly, or be absent on one side.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be rank >= 2, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading batch dims disagree, {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        if a._needs_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b._needs_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return _maybe_record(out, (a, b), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.tanh(x.data))

    def bw(g):
        _accum(x, g * (1.0 - out.data * out.data))

    return _maybe_record(out, (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # Stable in both tails.
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(out_data.astype(d.dtype, copy=False))

    def bw(g):
        _accum(x, g * out.data * (1.0 - out.data))

    return _maybe_record(out, (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.exp(x.data))

    def bw(g):
        _accum(x, g * out.data)

    return _maybe_record(out, (x,), bw)


def softmax(x) -> Tensor:
    """Softmax over the last axis; each row sums to 1."""
    x = as_tensor(x)
    if x.ndim < 1:
        raise ShapeError("softmax: needs at least one axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))

    def bw(g):
        y = out.data
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _maybe_record(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        offsets = np.cumsum(sizes)[:-1]
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            if t._needs_grad:
                _accum(t, piece)

    return _maybe_record(out, tensors, bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _maybe_record(out, (x,), bw)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.transpose(x.data, axes))
    inverse = np.argsort(axes)

    def bw(g):
        _accum(x, np.transpose(g, inverse))

    return _maybe_record(out, (x,), bw)


def tensor_sum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _maybe_record(out, (x,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table`; ids may have any shape."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx.min()) if idx.min() < 0 else int(idx.max())
        raise IndexError(f"embedding_lookup: id {bad} out of range [0, {n})")
    out = Tensor(table.data[idx])

    def bw(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, dt)

    return _maybe_record(out, (table,), bw)


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode is exactly the identity (the input tensor is returned).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    mask = keep / np.asarray(1.0 - p, dtype=x.dtype)
    out = Tensor(x.data * mask)

    def bw(g):
        _accum(x, g * mask)

    return _maybe_record(out, (x,), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax.

    `mask`, when given, weights positions and normalizes by its total.
    The reduction uses exact (fsum) summation, so the result is invariant
    to row permutations of the batch.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: targets shape {t.shape} != ({n},)")
    if t.size and (t.min() < 0 or t.max() >= v):
        bad = int(t.min()) if t.min() < 0 else int(t.max())
        raise IndexError(f"cross_entropy: target id {bad} out of range [0, {v})")
    if mask is None:
        m = np.ones(n, dtype=np.float64)
    else:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != (n,):
            raise ShapeError(f"cross_entropy: mask shape {m.shape} != ({n},)")
    total = math.fsum(m.tolist())
    if total <= 0.0:
        raise ValueError("cross_entropy: mask selects no positions")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), t]
    loss_value = math.fsum((nll.astype(np.float64) * m).tolist()) / total
    out = Tensor(np.asarray(loss_value, dtype=logits.dtype))

    def bw(g):
        soft = np.exp(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)))
        grad = soft.astype(np.float64)
        grad[np.arange(n), t] -= 1.0
        grad *= (m / total)[:, None]
        _accum(logits, (grad * float(g)).astype(logits.dtype))

    return _maybe_record(out, (logits,), bw)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference grads.

    `f` must be scalar-valued and deterministic.  Error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
        backward(tape, y)
    analytic = np.zeros_like(x.data) if x.grad is None else np.array(x.grad, copy=True)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Seeded Philox generator; `stream` separates independent uses."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream,))
    return np.random.Generator(np.random.Philox(ss))
