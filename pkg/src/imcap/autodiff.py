"""Dense tensors with tape-based reverse-mode differentiation on top of numpy.

Every differentiable op appends a node to the current thread's tape when at
least one input requires a gradient. :func:`backward` walks the tape in exact
reverse order, accumulates gradients into leaf tensors and clears the tape.

Broadcasting is limited on purpose: binary ops accept operands of equal shape
or a right operand whose shape is a suffix of the left one (bias-add style).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

MASK_VALUE = -1e9


class ShapeError(ValueError):
    pass


class _TapeState(threading.local):
    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True


_state = _TapeState()


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = _state.enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _state.nodes.append(_Node(out, tuple(parents), backward))
    return out


@contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def tape_length() -> int:
    return len(_state.nodes)


def clear_tape() -> None:
    _state.nodes.clear()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient, then clear the tape."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    nodes = _state.nodes
    try:
        if not loss.requires_grad:
            return
        grads = {id(loss): np.ones_like(loss.data)}
        produced = {id(node.out) for node in nodes}
        for node in reversed(nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in produced:
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    pg = np.asarray(pg, dtype=parent.data.dtype)
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    finally:
        nodes.clear()


# ---------------------------------------------------------------------------
# Elementwise and broadcasting helpers


def _check_suffix(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal or bias-compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.data, b.data, "sub")
    sb = b.shape
    return _record(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    if isinstance(a, (int, float)):
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    sb = b.shape
    return _record(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` (shared weights) or batch-aligned ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {ad.shape} vs {bd.shape}")
    out = ad @ bd

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(out, tensors, back)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _record(a.data[..., start:stop], (a,), back)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _record(table.data[ids], (table,), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean_all(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.data.size
    return _record(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _record(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Normalizations


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(a.data, axis)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _log_softmax_np(a.data, axis)

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(y, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with the population variance, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, bias), back)


def cross_entropy_loss(logits: Tensor, targets, pad_id: int = 0) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over non-pad positions.

    ``logits`` has shape ``[..., V]`` and ``targets`` the matching leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError("target id out of range")
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    keep = t != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy_loss: every target position is padding")
    logp = _log_softmax_np(flat, -1)
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / n

    def back(g):
        grad = np.exp(logp)
        grad[rows, t[rows]] -= 1.0
        grad[~keep] = 0.0
        return ((grad * (g / n)).reshape(logits.shape).astype(logits.dtype),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# ---------------------------------------------------------------------------
# Finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    indices: Sequence[tuple] | None = None,
) -> GradCheckReport:
    """Compare the autodiff gradient of scalar ``f`` at ``x`` with central differences.

    ``indices`` restricts the numeric sweep to chosen coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    clear_tape()
    backward(f(x))
    analytic_full = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = was

    if indices is None:
        indices = list(np.ndindex(*x.shape))
    analytic = np.array([analytic_full[i] for i in indices], dtype=np.float64)
    numeric = np.empty(len(indices), dtype=np.float64)
    with no_grad():
        for k, idx in enumerate(indices):
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = float(f(x).data)
            x.data[idx] = orig - h
            fm = float(f(x).data)
            x.data[idx] = orig
            numeric[k] = (fp - fm) / (2.0 * h)
    if len(indices) == 0:
        return GradCheckReport(0.0, (), analytic, numeric, True)
    err = relative_error(analytic, numeric)
    worst = int(np.argmax(err))
    max_err = float(err[worst])
    return GradCheckReport(max_err, tuple(indices[worst]), analytic, numeric, max_err < tol)
