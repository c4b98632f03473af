"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records a node carrying a monotonically increasing
sequence number.  ``Tensor.backward`` collects the nodes reachable from the
output and replays them in strictly decreasing sequence order, so gradients
of values used more than once accumulate additively before being pushed to
their parents.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from moelora.errors import DimensionError, InvalidObjectiveError, NumericError

DTYPE = np.float64

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording inside the block (evaluation, optimizer updates)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "parents", "backward")

    def __init__(self, parents, backward):
        self.seq = next(_seq)
        self.parents = parents
        self.backward = backward


class Tensor:
    """A dense real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every trainable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        holders: dict[int, Tensor] = {id(self): self}

        # collect reachable nodes
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is not None:
                order.append(t)
                stack.extend(t._node.parents)
        order.sort(key=lambda t: t._node.seq, reverse=True)

        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            parent_grads = t._node.backward(g)
            for p, pg in zip(t._node.parents, parent_grads):
                if pg is None or not _needs_grad(p):
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
                    holders[id(p)] = p

        for key, g in grads.items():
            leaf = holders[key]
            if leaf._node is None and leaf.requires_grad:
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._node = None
    if grad_enabled() and any(_needs_grad(p) for p in parents):
        out._node = _Node(tuple(parents), backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (a shared weight, ``a`` may carry leading batch axes)
    or has exactly ``a``'s leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch axes differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over ``a``'s last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            return g, g
    elif b.ndim == 1 and a.shape[-1:] == b.shape:
        def backward(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
    else:
        raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}")
    return _result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} * {b.shape}")

    def backward(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward)


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = as_tensor(a)

    def backward(g):
        return (np.full(a.shape, g, dtype=DTYPE),)

    return _result(np.array(a.data.sum()), (a,), backward)


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (2.0 * a.data * g,)

    return _result(a.data * a.data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences stay accurate)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _result(out, (a,), backward)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is an additive constant (use ``-inf`` to exclude entries); each
    row must keep at least one finite entry.
    """
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    z = a.data if mask is None else a.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (a,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != x.shape[-1:]:
        raise DimensionError(f"rms_norm gain {gain.shape} vs input {x.shape}")
    d = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + eps
    inv = 1.0 / np.sqrt(ms)
    xhat = x.data * inv
    out = xhat * gain.data

    def backward(g):
        gg = g * gain.data
        gx = inv * (gg - xhat * (gg * xhat).sum(axis=-1, keepdims=True) / d)
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _result(out, (x, gain), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), (a,), backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, parts, backward)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Rows of a 2-D table selected by an integer index array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("gather_rows needs a 2-D table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[idx], (table,), backward)


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or mask.shape != targets.shape:
        raise DimensionError(
            f"cross_entropy expects logits [T,V], targets [T], mask [T]; "
            f"got {logits.shape}, {targets.shape}, {mask.shape}"
        )
    V = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range for vocabulary of {V}")
    count = int(mask.sum())
    if count == 0:
        raise InvalidObjectiveError("no position selected by the loss mask")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.nonzero(mask)[0]
    nll = lse[rows] - z[rows, targets[rows]]
    loss = np.array(nll.sum() / count)

    def backward(g):
        p = np.exp(z[rows] - lse[rows, None])
        p[np.arange(rows.size), targets[rows]] -= 1.0
        full = np.zeros(logits.shape, dtype=DTYPE)
        full[rows] = p * (g / count)
        return (full,)

    return _result(loss, (logits,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# oracle

def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor | np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one entry at a time.

    ``x`` is perturbed in place and restored afterwards, so ``f`` may close
    over it (e.g. a model parameter).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    t = x if isinstance(x, Tensor) else Tensor(x)
    flat = t.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=DTYPE)

    def evaluate() -> float:
        with no_grad():
            v = f(t)
        v = float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise NumericError("objective produced a non-finite value during finite differencing")
        return v

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = evaluate()
        flat[i] = orig - eps
        lo = evaluate()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return out.reshape(t.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)``; 0 when both vanish."""
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / denom


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
