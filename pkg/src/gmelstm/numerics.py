"""Dense 2-D tensors with tape-free reverse-mode differentiation.

Every value is a float64 matrix. Operations build a graph by linking each
output to its parents together with a closure that maps the output gradient
to parent gradients; :func:`backward` walks that graph in reverse topological
order. Leaves created with ``requires_grad=True`` are the trainable
parameters.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class EmptySequenceError(ValueError):
    """A softmax or pooling received no valid position."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, metrics)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got array of shape {arr.shape}")
    return arr


class Tensor:
    """Immutable 2-D float64 value, optionally part of a compute graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # a view, so freezing it leaves the caller's array writable
        self.data = _as_matrix(data).view()
        self.data.setflags(write=False)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(value) -> Tensor:
    return Tensor(value)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    data.setflags(write=False)
    out.data = data
    out.grad = None
    out.name = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward_fn if track else None
    return out


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced a non-finite value")


# ---------------------------------------------------------------- linear ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Entry-wise sum; ``b`` may be a single row broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.rows == 1 and b.cols == a.cols:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, k: float) -> Tensor:
    return _make(a.data * k, (a,), lambda g: (g * k,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise DimensionError(
                f"concat_cols row mismatch: {[q.shape for q in parts]}")
    edges = np.cumsum([0] + [p.cols for p in parts])

    def back(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise DimensionError(
                f"concat_rows column mismatch: {[q.shape for q in parts]}")
    edges = np.cumsum([0] + [p.rows for p in parts])

    def back(g):
        return tuple(g[edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.cols:
        raise DimensionError(f"column slice [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop].copy(), (a,), back)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.rows:
        raise DimensionError(f"row slice [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop].copy(), (a,), back)


def select_rows(keep: np.ndarray, new: Tensor, old: Tensor) -> Tensor:
    """Row-wise choice: rows where ``keep`` is true come from ``new``, others from ``old``."""
    if new.shape != old.shape:
        raise DimensionError(f"select_rows shape mismatch: {new.shape} vs {old.shape}")
    keep = np.asarray(keep, dtype=bool).reshape(-1, 1)
    if keep.shape[0] != new.rows:
        raise DimensionError(f"select_rows mask has {keep.shape[0]} rows, tensors {new.rows}")
    zero = np.zeros(1)

    def back(g):
        return np.where(keep, g, zero), np.where(keep, zero, g)

    return _make(np.where(keep, new.data, old.data), (new, old), back)


# ------------------------------------------------------------ elementwise ops

def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise FloatingPointError("log of a non-positive value")
    return _make(np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.data.size
    return _make(np.array([[a.data.mean()]]), (a,),
                 lambda g: (np.full(shape, g[0, 0] / n),))


# ----------------------------------------------------------- attention pieces

def masked_softmax(logits: Tensor, valid) -> Tensor:
    """Row-wise softmax restricted to ``valid`` positions.

    Masked positions are exactly 0. A row with no valid position raises
    :class:`EmptySequenceError`.
    """
    valid = np.asarray(valid, dtype=bool)
    if valid.ndim == 1:
        valid = valid.reshape(1, -1)
    if valid.shape != logits.shape:
        raise DimensionError(f"mask shape {valid.shape} != logits shape {logits.shape}")
    if not np.all(valid.any(axis=1)):
        raise EmptySequenceError("softmax over a row with no valid position")
    x = np.where(valid, logits.data, -np.inf)
    x = x - x.max(axis=1, keepdims=True)
    e = np.where(valid, np.exp(x), 0.0)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (logits,), back)


def fold_time(a: Tensor, steps: int) -> Tensor:
    """Reshape a time-major column (steps*B x 1) into a (B x steps) matrix."""
    if a.cols != 1 or a.rows % steps:
        raise DimensionError(f"cannot fold {a.shape} into {steps} time steps")
    batch = a.rows // steps
    y = a.data.reshape(steps, batch).T.copy()
    return _make(y, (a,), lambda g: (g.T.reshape(-1, 1),))


def time_weighted_sum(hidden: Tensor, weights: Tensor) -> Tensor:
    """z[b] = sum_t weights[b, t] * hidden[t*B + b]; ``hidden`` is time-major."""
    batch, steps = weights.shape
    if hidden.rows != batch * steps:
        raise DimensionError(
            f"hidden {hidden.shape} does not match {steps} steps of batch {batch}")
    hs = hidden.data.reshape(steps, batch, hidden.cols)
    w = weights.data
    z = np.einsum("tbh,bt->bh", hs, w)

    def back(g):
        gh = np.einsum("bh,bt->tbh", g, w).reshape(hidden.shape)
        gw = np.einsum("tbh,bh->bt", hs, g)
        return gh, gw

    return _make(z, (hidden, weights), back)


# ------------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Every trainable leaf on the path gets ``.grad`` set. Returns gradients for
    ``leaves`` (default: the named trainable leaves reached), with zeros for
    leaves that ``loss`` does not depend on.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    order = _topo_order(loss) if loss.requires_grad else []
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    reached: list[Tensor] = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            reached.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if leaves is None:
        leaves = [n for n in reached if n.name is not None]
    out = {}
    for leaf in leaves:
        if not leaf.requires_grad:
            continue
        g = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        out[leaf.name if leaf.name is not None else str(id(leaf))] = g
    return out


# ------------------------------------------------------- finite differences

def numerical_gradient(fn: Callable[[dict[str, np.ndarray]], float],
                       params: dict[str, np.ndarray], eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of a scalar function of named arrays."""
    out = {}
    for name, value in params.items():
        g = np.zeros_like(value, dtype=np.float64)
        for idx in np.ndindex(value.shape):
            trial = {k: v.copy() for k, v in params.items()}
            trial[name][idx] = value[idx] + eps
            up = fn(trial)
            trial[name][idx] = value[idx] - eps
            down = fn(trial)
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor), the per-tensor relative error.

    The floor keeps gradients that cancel to exactly zero from being scored by
    finite-difference roundoff alone.
    """
    diff = np.linalg.norm(analytic - numeric)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / denom)
