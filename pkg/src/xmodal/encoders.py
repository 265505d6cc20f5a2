"""Encoder stage: token embeddings plus LSTM, GCN, convolution and self-attention encoders.

All encoders map ``[B, N, d]`` embedded tokens to an :class:`EncoderOutput`
whose padded rows are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .layers import (FeedForward, LayerNorm, Linear, LSTMCell, MultiHeadAttention,
                     const, expand_at, masked_mean, zero_masked)
from .tensor import Tensor


@dataclass
class EncoderOutput:
    states: Tensor          # [B, N, d]
    global_: Tensor         # [B, d]
    mask: np.ndarray        # [B, N] bool

    @classmethod
    def from_states(cls, states: Tensor, mask: np.ndarray) -> "EncoderOutput":
        states = zero_masked(states, mask)
        return cls(states, masked_mean(states, mask), mask)


class VisualEmbedding:
    """Linear projection of region/frame features, plus positions and optional norm."""

    def __init__(self, scope, d_v, d, max_pos=64, positional=True, norm=False):
        self.d_v = d_v
        self.proj = Linear(scope.sub("proj"), d_v, d)
        self.pos = scope.param("pos", (max_pos, d)) if positional else None
        self.norm = LayerNorm(scope.sub("norm"), d) if norm else None

    def __call__(self, features, mask: np.ndarray) -> Tensor:
        if not isinstance(features, Tensor):
            features = const(features)
        if features.shape[-1] != self.d_v:
            raise ShapeError(f"visual features have dim {features.shape[-1]}, projection expects {self.d_v}")
        x = self.proj(zero_masked(features, mask))
        if self.pos is not None:
            B, N, _ = x.shape
            x = x + expand_at(self.pos[:N], 0, B)
        if self.norm is not None:
            x = self.norm(x)
        return zero_masked(x, mask)


class TextEmbedding:
    """Word table lookup plus a learned position table."""

    def __init__(self, scope, vocab_size, d, max_pos=64, positional=True):
        self.table = scope.param("table", (vocab_size, d))
        self.pos = scope.param("pos", (max_pos, d)) if positional else None

    def __call__(self, ids, mask=None, offset=0) -> Tensor:
        ids = np.asarray(ids)
        x = T.embedding_lookup(self.table, ids)
        if self.pos is not None:
            L = ids.shape[-1]
            pos = self.pos[offset:offset + L]
            if ids.ndim == 2:
                pos = expand_at(pos, 0, ids.shape[0])
            x = x + pos
        if mask is not None:
            x = zero_masked(x, np.asarray(mask, dtype=bool))
        return x


def embed_tokens(seq, params) -> Tensor:
    """Embed a single TokenSequence or VisualTokens with the matching embedding."""
    from .data import TokenSequence, VisualTokens
    if isinstance(seq, TokenSequence):
        return params(np.asarray(seq.ids)[None], np.asarray(seq.mask)[None])[0]
    if isinstance(seq, VisualTokens):
        return params(seq.features[None], np.ones((1, seq.n), dtype=bool))[0]
    raise TypeError(f"cannot embed {type(seq).__name__}")


class LSTMEncoder:
    def __init__(self, scope, d, layers=1):
        self.cells = [LSTMCell(scope.sub(f"layer{i}"), d, d) for i in range(layers)]
        self.d = d

    def __call__(self, x, mask, edges=None) -> EncoderOutput:
        B, N, _ = x.shape
        for cell in self.cells:
            h = c = T.zeros(B, self.d)
            outs = []
            for t in range(N):
                h, c = cell(x[:, t], (h, c), mask[:, t])
                outs.append(h)
            x = T.stack(outs, axis=1)
        return EncoderOutput.from_states(x, mask)


class GCNEncoder:
    """Relation-aware graph convolution: self term plus degree-normalized neighbor sum."""

    def __init__(self, scope, d, layers=1, relations=3):
        self.relations = relations
        self.layers = []
        for i in range(layers):
            s = scope.sub(f"layer{i}")
            self.layers.append((Linear(s.sub("self"), d, d),
                                [s.param(f"rel{r}", (d, d)) for r in range(relations)]))

    def adjacency(self, edges, B, N) -> dict[int, np.ndarray]:
        adj: dict[int, np.ndarray] = {}
        deg = np.zeros((B, N))
        for b, e in enumerate(edges or [None] * B):
            if e is None:
                continue
            for i, j, r in np.asarray(e).reshape(-1, 3):
                if not 0 <= r < self.relations:
                    raise FormatError(f"unknown relation id {r} (have {self.relations})")
                if i >= N or j >= N:
                    raise ShapeError(f"edge ({i}, {j}) outside {N} regions")
                adj.setdefault(int(r), np.zeros((B, N, N)))[b, i, j] += 1.0
                deg[b, i] += 1.0
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
        return {r: a * inv[:, :, None] for r, a in sorted(adj.items())}

    def __call__(self, x, mask, edges=None) -> EncoderOutput:
        B, N, _ = x.shape
        adj = self.adjacency(edges, B, N)
        for self_map, rel in self.layers:
            h = self_map(x)
            for r, a in adj.items():
                h = h + T.bmm(const(a), T.linear(x, rel[r]))
            x = T.relu(h)
        return EncoderOutput.from_states(x, mask)


class ConvEncoder:
    """Same-padded 1-D gated linear unit convolutions with residual connections."""

    def __init__(self, scope, d, layers=1, kernel=3):
        if kernel % 2 == 0:
            raise ConfigError(f"[encoder] kernel must be odd, got {kernel}")
        self.kernel = kernel
        self.layers = []
        for i in range(layers):
            s = scope.sub(f"layer{i}")
            self.layers.append((Linear(s.sub("a"), kernel * d, d), Linear(s.sub("b"), kernel * d, d)))

    def __call__(self, x, mask, edges=None) -> EncoderOutput:
        B, N, d = x.shape
        p = self.kernel // 2
        for lin_a, lin_b in self.layers:
            x = zero_masked(x, mask)
            if p:
                pad = T.zeros(B, p, d)
                xp = T.concat([pad, x, pad], axis=1)
                win = T.concat([xp[:, o:o + N] for o in range(self.kernel)], axis=-1)
            else:
                win = x
            x = lin_a(win) * T.sigmoid(lin_b(win)) + x
        return EncoderOutput.from_states(x, mask)


class SelfAttentionBlock:
    def __init__(self, scope, d, heads, d_ff):
        self.attn = MultiHeadAttention(scope.sub("attn"), d, heads)
        self.ln1 = LayerNorm(scope.sub("ln1"), d)
        self.ffn = FeedForward(scope.sub("ffn"), d, d_ff)
        self.ln2 = LayerNorm(scope.sub("ln2"), d)

    def __call__(self, x, mask):
        x = self.ln1(x + self.attn(x, x, mask))
        return self.ln2(x + self.ffn(x))


class SelfAttentionEncoder:
    def __init__(self, scope, d, layers=1, heads=2, d_ff=None):
        if d % heads:
            raise ConfigError(f"[encoder] hidden {d} not divisible by heads {heads}")
        self.blocks = [SelfAttentionBlock(scope.sub(f"block{i}"), d, heads, d_ff or 2 * d)
                       for i in range(layers)]

    @property
    def last_weights(self):
        return self.blocks[-1].attn.last_weights

    def __call__(self, x, mask, edges=None) -> EncoderOutput:
        for block in self.blocks:
            x = block(x, mask)
        return EncoderOutput.from_states(x, mask)


def _single(x, mask):
    x = x if x.ndim == 3 else T.reshape(x, (1,) + x.shape)
    mask = np.ones(x.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(x.shape[:2])
    return x, mask


def lstm_encode(x, mask, params: LSTMEncoder) -> EncoderOutput:
    return params(*_single(x, mask))


def gcn_encode(x, edges, params: GCNEncoder) -> EncoderOutput:
    x, mask = _single(x, None)
    return params(x, mask, [edges])


def conv_encode(x, mask, params: ConvEncoder) -> EncoderOutput:
    return params(*_single(x, mask))


def self_attention_encode(x, mask, params: SelfAttentionEncoder) -> EncoderOutput:
    return params(*_single(x, mask))
