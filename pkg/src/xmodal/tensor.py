"""Double-precision tensors with tape-based reverse-mode differentiation.

Every differentiable operation whose inputs require gradients appends its
output to the thread's active :class:`Tape`; :func:`backward` replays the tape
in reverse.  There is no implicit broadcasting: binary operations take equal
shapes or a Python scalar, and callers expand explicitly with
:func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    DomainError,
    NumericError,
    ShapeError,
    TokenIndexError,
    UsageError,
)

__all__ = [
    "Tape", "Tensor", "tensor", "zeros", "ones", "no_grad", "default_tape",
    "backward", "zero_grads", "gradient_check", "matmul", "bmm", "linear",
    "elementwise", "add", "sub", "mul", "scale", "neg", "tanh", "sigmoid",
    "relu", "exp", "log", "sum", "mean", "reshape", "transpose", "concat",
    "stack", "take", "broadcast_to", "softmax", "log_softmax", "layer_norm",
    "embedding_lookup", "pick", "dropout",
]


class Tape:
    """Ordered record of operations awaiting a backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def default_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block (inference, finite differences)."""
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")
    __array_priority__ = 100  # keep numpy from hijacking reflected operators

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        if not np.isfinite(self.data).all():
            raise NumericError("tensor values must be finite")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _not_scalar(t):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def zeros(*shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones(*shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError("operation produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        default_tape().record(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients add onto whatever ``.grad`` already holds; call
    :func:`zero_grads` between steps.  The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = default_tape() if tape is None else tape
    if not loss.requires_grad:
        tape.clear()
        return
    if loss._backward is None:
        _accumulate(loss, np.ones_like(loss.data))
        tape.clear()
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accumulate(parent, pg)
            else:
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    tape.clear()


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if g.shape != leaf.data.shape:
        g = np.reshape(g, leaf.data.shape)
    if not np.isfinite(g).all():
        raise NumericError("non-finite gradient reached a leaf tensor")
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` is re-evaluated with each parameter entry nudged by ``±eps``; the
    relative error of one entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    zero_grads(params)
    default_tape().clear()
    loss = f()
    backward(loss)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic.reshape(-1)[i]
                if not (math.isfinite(numeric) and math.isfinite(a)):
                    raise NumericError("non-finite value during gradient check")
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    zero_grads(params)
    return worst


# ------------------------------------------------------------ linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _make(A @ B, (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product of ``[n, m, k]`` and ``[n, k, p]``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shape mismatch: {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.transpose(0, 2, 1) if a.requires_grad else None,
                A.transpose(0, 2, 1) @ g if b.requires_grad else None)

    return _make(A @ B, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b`` for any leading shape."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias {b.shape} does not match weight {w.shape}")
    X, W = x.data, w.data
    out = X @ W
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ W.T if x.requires_grad else None
        gw = X.reshape(-1, X.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


# ---------------------------------------------------------------- pointwise

def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid_np(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise DomainError("log of a non-positive value")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch a pointwise operation by name."""
    if op in _UNARY:
        if b is not None:
            raise UsageError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise UsageError(f"{op} needs a second operand")
        return _BINARY[op](a, b)
    raise UsageError(f"unknown elementwise op {op!r}")


# -------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=np.float64)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / n)


# ----------------------------------------------------------------- shaping

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts), bw)


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    if not all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts):
        raise UsageError("tensor indexing takes ints and slices; use take() for index arrays")

    def bw(g):
        out = np.zeros(shape)
        out[idx] = g  # basic indexing never repeats an element
        return (out,)

    return _make(np.array(a.data[idx], dtype=np.float64), (a,), bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` by an integer index array (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape
    if idx.size and (idx.min() < 0 or idx.max() >= shape[axis]):
        raise TokenIndexError(f"index out of range for axis of size {shape[axis]}")

    def bw(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, idx, axis=axis), (a,), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicitly expand size-1 axes; ranks must already agree."""
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    expanded = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)

    def bw(g):
        return (g.sum(axis=expanded, keepdims=True) if expanded else g,)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), bw)


# --------------------------------------------------------- normalizations

def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax; masked-out entries come out exactly 0."""
    x = a.data
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        if m.shape != x.shape:
            raise ShapeError(f"softmax mask {m.shape} does not match input {x.shape}")
        if not m.any(axis=axis).all():
            raise DegenerateInputError("softmax over a fully masked slice")
        x = np.where(m, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis (population variance), then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gain.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gh = g * G
        gx = inv / d * (d * gh - gh.sum(-1, keepdims=True)
                        - xhat * (gh * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * G + bias.data, (a, gain, bias), bw)


# ------------------------------------------------------------- gathering

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` for each id; output shape is ``ids.shape + (d,)``."""
    idx = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    bad = idx[(idx < 0) | (idx >= V)]
    if bad.size:
        raise TokenIndexError(f"token id {int(bad.reshape(-1)[0])} out of range for vocabulary of {V}")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[idx], (table,), bw)


def pick(a: Tensor, index) -> Tensor:
    """``out[...] = a[..., index[...]]``: one entry from the last axis per position."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"pick index {idx.shape} must match {a.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise TokenIndexError(f"index out of range for last axis of size {a.shape[-1]}")
    shape = a.shape
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(out, (a,), bw)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; a no-op when ``p == 0`` or ``rng`` is None (eval mode)."""
    if p <= 0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))
