"""Shared building blocks: affine maps, normalization, recurrent cells, attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


def const(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64))


def expand_rows(mask: np.ndarray, width: int) -> Tensor:
    """``[..., N]`` boolean mask to a ``[..., N, width]`` 0/1 constant."""
    return const(np.repeat(mask[..., None].astype(np.float64), width, axis=-1))


def zero_masked(x: Tensor, mask: np.ndarray) -> Tensor:
    return x * expand_rows(mask, x.shape[-1])


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 of ``x[..., N, d]`` restricted to ``mask[..., N]``."""
    count = np.maximum(mask.sum(-1), 1).astype(np.float64)
    summed = T.sum(x * expand_rows(mask, x.shape[-1]), axis=-2)
    return summed * expand_rows(1.0 / count, x.shape[-1])


def unsqueeze(x: Tensor, axis: int) -> Tensor:
    shape = list(x.shape)
    shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
    return T.reshape(x, tuple(shape))


def expand_at(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis and repeat ``x`` ``n`` times along it."""
    y = unsqueeze(x, axis)
    shape = list(y.shape)
    shape[axis] = n
    return T.broadcast_to(y, tuple(shape))


class Linear:
    def __init__(self, scope, d_in, d_out, bias=True):
        self.w = scope.param("w", (d_in, d_out))
        self.b = scope.param("b", (d_out,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, scope, d, eps=1e-5):
        self.gain = scope.param("gain", (d,), "ones")
        self.bias = scope.param("bias", (d,), "zeros")
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward:
    def __init__(self, scope, d, d_ff):
        self.fc1 = Linear(scope.sub("fc1"), d, d_ff)
        self.fc2 = Linear(scope.sub("fc2"), d_ff, d)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class LSTMCell:
    """Gates packed as [input, forget, output | candidate] in one affine map."""

    def __init__(self, scope, d_in, d_hidden):
        self.hidden = d_hidden
        self.w = scope.param("w", (d_in + d_hidden, 4 * d_hidden))
        self.b = scope.param("b", (4 * d_hidden,), "zeros")

    def __call__(self, x, state, mask=None):
        h, c = state
        H = self.hidden
        z = T.linear(T.concat([x, h], axis=-1), self.w, self.b)
        gates = T.sigmoid(z[..., : 3 * H])
        g = T.tanh(z[..., 3 * H:])
        i, f, o = gates[..., :H], gates[..., H:2 * H], gates[..., 2 * H:]
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        if mask is not None:
            keep = expand_rows(mask, H)
            hold = expand_rows(~mask, H)
            c_new = c_new * keep + c * hold
            h_new = h_new * keep + h * hold
        return h_new, c_new


class GRUCell:
    """h' = (1 - u) * h + u * n, so a closed update gate keeps the old state."""

    def __init__(self, scope, d_in, d_hidden):
        self.hidden = d_hidden
        self.w_gates = scope.param("w_gates", (d_in + d_hidden, 2 * d_hidden))
        self.b_gates = scope.param("b_gates", (2 * d_hidden,), "zeros")
        self.w_x = scope.param("w_x", (d_in, d_hidden))
        self.w_h = scope.param("w_h", (d_hidden, d_hidden))
        self.b_x = scope.param("b_x", (d_hidden,), "zeros")
        self.b_h = scope.param("b_h", (d_hidden,), "zeros")

    def __call__(self, x, state, mask=None):
        (h,) = state
        H = self.hidden
        gates = T.sigmoid(T.linear(T.concat([x, h], axis=-1), self.w_gates, self.b_gates))
        u, r = gates[..., :H], gates[..., H:]
        n = T.tanh(T.linear(x, self.w_x, self.b_x) + r * T.linear(h, self.w_h, self.b_h))
        h_new = h + u * (n - h)
        if mask is not None:
            h_new = h_new * expand_rows(mask, H) + h * expand_rows(~mask, H)
        return (h_new,)


@dataclass
class AttentionResult:
    context: Tensor
    weights: np.ndarray


class MultiHeadAttention:
    """Scaled dot-product attention with optional learned extra key/value rows."""

    def __init__(self, scope, d, heads, d_kv=None):
        if d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.d, self.heads = d, heads
        self.q = Linear(scope.sub("q"), d, d)
        # no key bias: it shifts every score in a row equally, so softmax ignores it
        self.k = Linear(scope.sub("k"), d_kv, d, bias=False)
        self.v = Linear(scope.sub("v"), d_kv, d)
        self.o = Linear(scope.sub("o"), d, d)
        self.last_weights = None

    def _split(self, x):
        B, L, _ = x.shape
        h, dh = self.heads, self.d // self.heads
        x = T.reshape(x, (B, L, h, dh))
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B * h, L, dh))

    def __call__(self, queries, sources, key_mask, causal=False, extra_k=None, extra_v=None):
        B, Tq, _ = queries.shape
        k, v = self.k(sources), self.v(sources)
        key_mask = np.asarray(key_mask, dtype=bool)
        if extra_k is not None and extra_k.shape[0] > 0:
            M = extra_k.shape[0]
            k = T.concat([k, expand_at(extra_k, 0, B)], axis=1)
            v = T.concat([v, expand_at(extra_v, 0, B)], axis=1)
            key_mask = np.concatenate([key_mask, np.ones((B, M), dtype=bool)], axis=1)
        Tk = k.shape[1]
        h, dh = self.heads, self.d // self.heads
        q = self._split(self.q(queries))
        k, v = self._split(k), self._split(v)
        scores = T.bmm(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
        mask = np.broadcast_to(key_mask[:, None, None, :], (B, h, Tq, Tk))
        if causal:
            mask = mask & np.tril(np.ones((Tq, Tk), dtype=bool), k=Tk - Tq)
        w = T.softmax(scores, axis=-1, mask=mask.reshape(B * h, Tq, Tk))
        self.last_weights = w.data.reshape(B, h, Tq, Tk)
        out = T.bmm(w, v)
        out = T.reshape(T.transpose(T.reshape(out, (B, h, Tq, dh)), (0, 2, 1, 3)), (B, Tq, self.d))
        return self.o(out)
