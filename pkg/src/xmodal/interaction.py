"""Cross-modal interaction modules.

Every module offers two entry points over encoder states:

* ``cross(queries [B, T, d_q], enc)`` answers each query position
  independently (used inside transformer/convolution decoders);
* ``step(query [B, d_q], word_emb, enc, state)`` for one recurrent
  decoding step, threading any private recurrent state.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import EncoderOutput
from .errors import ConfigError, DegenerateInputError
from .layers import (AttentionResult, FeedForward, LayerNorm, LSTMCell, MultiHeadAttention,
                     expand_at, expand_rows, unsqueeze)
from .tensor import Tensor


def _query_mask(mask: np.ndarray, Tq: int) -> np.ndarray:
    if not mask.any(axis=-1).all():
        raise DegenerateInputError("attention over a fully masked source")
    return np.broadcast_to(mask[:, None, :], (mask.shape[0], Tq, mask.shape[1]))


class _Stateless:
    stateful = False

    def init_state(self, batch_size):
        return None

    def step(self, query, word_emb, enc: EncoderOutput, state=None):
        return self.cross(unsqueeze(query, 1), enc)[:, 0], state


class AdditiveAttention(_Stateless):
    """e_i = w . tanh(W_q q + W_k k_i), softmax over unmasked sources."""

    def __init__(self, scope, d_q, d_k, d_att):
        self.wq = scope.param("wq", (d_q, d_att))
        self.wk = scope.param("wk", (d_k, d_att))
        self.w = scope.param("w", (d_att, 1))
        self.last_weights = None

    def attend(self, queries, keys, values, mask):
        B, Tq, _ = queries.shape
        N = keys.shape[1]
        qa = expand_at(T.linear(queries, self.wq), 2, N)
        ka = expand_at(T.linear(keys, self.wk), 1, Tq)
        e = T.reshape(T.linear(T.tanh(qa + ka), self.w), (B, Tq, N))
        w = T.softmax(e, axis=-1, mask=_query_mask(mask, Tq))
        self.last_weights = w.data
        return T.bmm(w, values), w.data

    def cross(self, queries, enc):
        return self.attend(queries, enc.states, enc.states, enc.mask)[0]


class XLinearAttention(_Stateless):
    """Bilinear spatial attention with a channel-wise sigmoid gate.

    joint_i = sigmoid(W_k k_i) * sigmoid(W_q q); r_i = relu(W_b joint_i)
    beta = softmax(w . r_i); gamma = sigmoid(W_c mean_i r_i)
    context = gamma * sum_i beta_i (W_v v_i * sigmoid(W_q' q))
    """

    def __init__(self, scope, d_q, d_k, d_v, d_b, d_m=None):
        d_m = d_m or d_b
        self.wk = scope.param("wk", (d_k, d_b))
        self.wq = scope.param("wq", (d_q, d_b))
        self.wb = scope.param("wb", (d_b, d_m))
        self.w = scope.param("w", (d_m, 1))
        self.wc = scope.param("wc", (d_m, d_v))
        self.wv = scope.param("wv", (d_v, d_v))
        self.wq2 = scope.param("wq2", (d_q, d_v))
        self.last_weights = None
        self.last_gate = None

    def attend(self, queries, keys, values, mask):
        B, Tq, _ = queries.shape
        N = keys.shape[1]
        qmask = _query_mask(mask, Tq)
        joint = (expand_at(T.sigmoid(T.linear(keys, self.wk)), 1, Tq)
                 * expand_at(T.sigmoid(T.linear(queries, self.wq)), 2, N))
        r = T.relu(T.linear(joint, self.wb))                       # [B, Tq, N, d_m]
        beta = T.softmax(T.reshape(T.linear(r, self.w), (B, Tq, N)), axis=-1, mask=qmask)
        count = qmask.sum(-1).astype(np.float64)                    # [B, Tq]
        pooled = T.sum(r * expand_rows(qmask, r.shape[-1]), axis=2) * expand_rows(1.0 / count, r.shape[-1])
        gamma = T.sigmoid(T.linear(pooled, self.wc))                # [B, Tq, d_v]
        gated = (expand_at(T.linear(values, self.wv), 1, Tq)
                 * expand_at(T.sigmoid(T.linear(queries, self.wq2)), 2, N))  # [B, Tq, N, d_v]
        d_v = gated.shape[-1]
        ctx = T.bmm(T.reshape(beta, (B * Tq, 1, N)), T.reshape(gated, (B * Tq, N, d_v)))
        self.last_weights = beta.data
        self.last_gate = gamma.data
        return gamma * T.reshape(ctx, (B, Tq, d_v)), beta.data

    def cross(self, queries, enc):
        return self.attend(queries, enc.states, enc.states, enc.mask)[0]


class TopDownAttention:
    """Attention LSTM over [h_lang; global; word] whose state queries the regions."""

    stateful = True

    def __init__(self, scope, d, d_word, d_v, d_att):
        self.d = d
        self.cell = LSTMCell(scope.sub("att_lstm"), d + d_v + d_word, d)
        self.attn = AdditiveAttention(scope.sub("attn"), d, d_v, d_att)

    def init_state(self, batch_size):
        return (T.zeros(batch_size, self.d), T.zeros(batch_size, self.d))

    def step(self, query, word_emb, enc: EncoderOutput, state):
        h, c = self.cell(T.concat([query, enc.global_, word_emb], axis=-1), state)
        ctx, _ = self.attn.attend(unsqueeze(h, 1), enc.states, enc.states, enc.mask)
        return ctx[:, 0], (h, c)

    def cross(self, queries, enc):
        raise ConfigError("top_down interaction needs a recurrent decoder (lstm or gru)")


class _CrossBlock:
    def __init__(self, scope, d, heads, d_ff):
        self.attn = MultiHeadAttention(scope.sub("attn"), d, heads)
        self.ln1 = LayerNorm(scope.sub("ln1"), d)
        self.ffn = FeedForward(scope.sub("ffn"), d, d_ff)
        self.ln2 = LayerNorm(scope.sub("ln2"), d)

    def __call__(self, x, source, source_mask):
        x = self.ln1(x + self.attn(x, source, source_mask))
        return self.ln2(x + self.ffn(x))


class CoAttention(_Stateless):
    """Two parallel cross-attention blocks: A attends over B and B over A."""

    def __init__(self, scope, d, heads=2, d_ff=None, tied=False):
        self.a = _CrossBlock(scope.sub("a"), d, heads, d_ff or 2 * d)
        self.b = self.a if tied else _CrossBlock(scope.sub("b"), d, heads, d_ff or 2 * d)

    def block(self, x_a, x_b, mask_a, mask_b):
        return self.a(x_a, x_b, mask_b), self.b(x_b, x_a, mask_a)

    def cross(self, queries, enc):
        return self.a(queries, enc.states, enc.mask)


class MeshedMemoryAttention(_Stateless):
    """Multi-head attention whose keys/values are extended by learned memory rows."""

    def __init__(self, scope, d, heads=2, memory_slots=4):
        self.attn = MultiHeadAttention(scope.sub("attn"), d, heads)
        self.mem_k = scope.param("mem_k", (memory_slots, d))
        self.mem_v = scope.param("mem_v", (memory_slots, d))

    def __call__(self, x, mask):
        return self.attn(x, x, mask, extra_k=self.mem_k, extra_v=self.mem_v)

    def cross(self, queries, enc):
        return self.attn(queries, enc.states, enc.mask, extra_k=self.mem_k, extra_v=self.mem_v)


# ----------------------------------------------------- single-example forms

def _mask1(mask, n):
    return np.ones((1, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(1, n)


def _rows(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape)


def additive_attention(query, keys, values, mask, params: AdditiveAttention) -> AttentionResult:
    N = keys.shape[0]
    ctx, w = params.attend(T.reshape(query, (1, 1, -1)), _rows(keys), _rows(values), _mask1(mask, N))
    return AttentionResult(T.reshape(ctx, (-1,)), w.reshape(N))


def x_linear_attention(query, keys, values, mask, params: XLinearAttention) -> AttentionResult:
    N = keys.shape[0]
    ctx, w = params.attend(T.reshape(query, (1, 1, -1)), _rows(keys), _rows(values), _mask1(mask, N))
    return AttentionResult(T.reshape(ctx, (-1,)), w.reshape(N))


def top_down_step(h_lang, word_emb, regions, global_, state, params: TopDownAttention):
    N = regions.shape[0]
    enc = EncoderOutput(_rows(regions), _rows(global_), np.ones((1, N), dtype=bool))
    if state is None:
        state = params.init_state(1)
    else:
        state = tuple(_rows(s) if s.ndim == 1 else s for s in state)
    ctx, (h, c) = params.step(_rows(h_lang), _rows(word_emb), enc, state)
    return T.reshape(ctx, (-1,)), (T.reshape(h, (-1,)), T.reshape(c, (-1,)))


def co_attention_block(x_a, x_b, masks, params: CoAttention):
    mask_a, mask_b = masks if masks is not None else (None, None)
    ya, yb = params.block(_rows(x_a), _rows(x_b), _mask1(mask_a, x_a.shape[0]), _mask1(mask_b, x_b.shape[0]))
    return ya[0], yb[0]


def meshed_memory_attention(x, mask, params: MeshedMemoryAttention) -> Tensor:
    return params(_rows(x), _mask1(mask, x.shape[0]))[0]

