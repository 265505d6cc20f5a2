"""Decoder stage: recurrent (LSTM/GRU), causal convolution and transformer decoders.

Decoders share one interface so decode strategies and training code never
look at the family:

* ``forward(tokens [B, T], enc) -> hidden [B, T, d]`` (teacher forced)
* ``init_state(enc) -> state`` and ``step(state, tokens [B]) -> (hidden [B, d], state)``

States are plain dicts of batch-first tensors; :func:`select_rows` reorders
them for beam search.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import EncoderOutput
from .errors import ConfigError
from .layers import FeedForward, GRUCell, LayerNorm, Linear, LSTMCell, MultiHeadAttention, expand_at
from .tensor import Tensor


def select_rows(obj, idx):
    """Gather batch rows ``idx`` from every tensor/array inside a decoder state."""
    if isinstance(obj, Tensor):
        return T.take(obj, idx, axis=0)
    if isinstance(obj, np.ndarray):
        return obj[idx]
    if isinstance(obj, EncoderOutput):
        return EncoderOutput(T.take(obj.states, idx, 0), T.take(obj.global_, idx, 0), obj.mask[idx])
    if isinstance(obj, dict):
        return {k: select_rows(v, idx) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(select_rows(v, idx) for v in obj)
    return obj


class LogitsHead:
    """Affine map to vocabulary logits, optionally sharing the input embedding."""

    def __init__(self, scope, d, vocab_size, tied_table=None):
        self.tied = tied_table
        self.w = None if tied_table is not None else scope.param("w", (d, vocab_size))
        self.b = scope.param("b", (vocab_size,), "zeros")

    def __call__(self, hidden: Tensor) -> Tensor:
        w = T.transpose(self.tied) if self.tied is not None else self.w
        return T.linear(hidden, w, self.b)


def project_logits(hidden, params: LogitsHead) -> Tensor:
    return params(hidden)


class RecurrentDecoder:
    """LSTM/GRU stack fed [word; context], context from the interaction module."""

    def __init__(self, scope, vocab_size, d, interaction, cell="lstm", layers=1, d_word=None):
        if cell not in ("lstm", "gru"):
            raise ConfigError(f"unknown recurrent cell {cell!r}")
        d_word = d_word or d
        self.d, self.cell_kind = d, cell
        self.embed = scope.param("embed", (vocab_size, d_word))
        self.interaction = interaction
        Cell = LSTMCell if cell == "lstm" else GRUCell
        self.cells = [Cell(scope.sub(f"layer{i}"), (d_word + d) if i == 0 else d, d) for i in range(layers)]

    def init_state(self, enc: EncoderOutput):
        B = enc.states.shape[0]
        n = 2 if self.cell_kind == "lstm" else 1
        layers = [tuple(T.zeros(B, self.d) for _ in range(n)) for _ in self.cells]
        return {"layers": layers, "inter": self.interaction.init_state(B), "enc": enc}

    def step(self, state, tokens):
        enc = state["enc"]
        word = T.embedding_lookup(self.embed, np.asarray(tokens))
        query = state["layers"][-1][0]
        ctx, inter = self.interaction.step(query, word, enc, state["inter"])
        x = T.concat([word, ctx], axis=-1)
        new_layers = []
        for cell, st in zip(self.cells, state["layers"]):
            st = cell(x, st)
            new_layers.append(st)
            x = st[0]
        return x, {"layers": new_layers, "inter": inter, "enc": enc}

    def forward(self, tokens, enc):
        tokens = np.asarray(tokens)
        state = self.init_state(enc)
        outs = []
        for t in range(tokens.shape[1]):
            h, state = self.step(state, tokens[:, t])
            outs.append(h)
        return T.stack(outs, axis=1)


def recurrent_decoder_step(state, word_ids, enc, params: RecurrentDecoder):
    if state is None:
        state = params.init_state(enc)
    return params.step(state, word_ids)


class _Positional:
    def _embed(self, tokens, offset):
        tokens = np.asarray(tokens)
        B, L = tokens.shape
        if offset + L > self.pos.shape[0]:
            raise ConfigError(f"sequence length {offset + L} exceeds [decoder] max_pos {self.pos.shape[0]}")
        return T.embedding_lookup(self.embed, tokens) + expand_at(self.pos[offset:offset + L], 0, B)


class ConvDecoder(_Positional):
    """Left-padded GLU convolutions, each followed by attention over encoder states."""

    def __init__(self, scope, vocab_size, d, make_interaction, layers=1, kernel=3, max_pos=64):
        self.d, self.kernel = d, kernel
        self.embed = scope.param("embed", (vocab_size, d))
        self.pos = scope.param("pos", (max_pos, d))
        self.layers = []
        for i in range(layers):
            s = scope.sub(f"layer{i}")
            self.layers.append((Linear(s.sub("a"), kernel * d, d), Linear(s.sub("b"), kernel * d, d),
                                make_interaction(s.sub("attn"))))

    def _glu(self, lin_a, lin_b, window, x):
        return lin_a(window) * T.sigmoid(lin_b(window)) + x

    def forward(self, tokens, enc):
        x = self._embed(tokens, 0)
        B, L, d = x.shape
        K = self.kernel
        for lin_a, lin_b, inter in self.layers:
            if K > 1:
                xp = T.concat([T.zeros(B, K - 1, d), x], axis=1)
                win = T.concat([xp[:, o:o + L] for o in range(K)], axis=-1)
            else:
                win = x
            x = self._glu(lin_a, lin_b, win, x)
            x = x + inter.cross(x, enc)
        return x

    def init_state(self, enc):
        return {"hist": [[] for _ in self.layers], "t": 0, "enc": enc}

    def step(self, state, tokens):
        enc, t = state["enc"], state["t"]
        x = self._embed(np.asarray(tokens)[:, None], t)[:, 0]
        B, d = x.shape
        K = self.kernel
        hist = []
        for (lin_a, lin_b, inter), past in zip(self.layers, state["hist"]):
            past = past + [x]
            window = past[-K:]
            if len(window) < K:
                window = [T.zeros(B, d)] * (K - len(window)) + window
            win = T.concat(window, axis=-1) if K > 1 else x
            y = self._glu(lin_a, lin_b, win, x)
            y = y + inter.cross(expand_at(y, 1, 1), enc)[:, 0]
            hist.append(past)
            x = y
        return x, {"hist": hist, "t": t + 1, "enc": enc}


class TransformerDecoder(_Positional):
    """Causal self-attention, cross-attention (interaction flavor), feed-forward; post-norm."""

    def __init__(self, scope, vocab_size, d, make_interaction, layers=1, heads=2, d_ff=None, max_pos=64):
        if d % heads:
            raise ConfigError(f"[decoder] hidden {d} not divisible by heads {heads}")
        self.d = d
        self.embed = scope.param("embed", (vocab_size, d))
        self.pos = scope.param("pos", (max_pos, d))
        self.blocks = []
        for i in range(layers):
            s = scope.sub(f"block{i}")
            self.blocks.append({
                "self": MultiHeadAttention(s.sub("self_attn"), d, heads),
                "ln1": LayerNorm(s.sub("ln1"), d),
                "cross": make_interaction(s.sub("cross")),
                "ln2": LayerNorm(s.sub("ln2"), d),
                "ffn": FeedForward(s.sub("ffn"), d, d_ff or 2 * d),
                "ln3": LayerNorm(s.sub("ln3"), d),
            })

    def _block(self, blk, x, keys, key_mask, causal, enc):
        x = blk["ln1"](x + blk["self"](x, keys, key_mask, causal=causal))
        x = blk["ln2"](x + blk["cross"].cross(x, enc))
        return blk["ln3"](x + blk["ffn"](x))

    def forward(self, tokens, enc):
        x = self._embed(tokens, 0)
        mask = np.ones(x.shape[:2], dtype=bool)
        for blk in self.blocks:
            x = self._block(blk, x, x, mask, True, enc)
        return x

    def init_state(self, enc):
        return {"hist": [[] for _ in self.blocks], "t": 0, "enc": enc}

    def step(self, state, tokens):
        enc, t = state["enc"], state["t"]
        x = self._embed(np.asarray(tokens)[:, None], t)       # [B, 1, d]
        hist = []
        for blk, past in zip(self.blocks, state["hist"]):
            past = past + [x]
            keys = T.concat(past, axis=1) if len(past) > 1 else x
            mask = np.ones(keys.shape[:2], dtype=bool)
            hist.append(past)
            x = self._block(blk, x, keys, mask, False, enc)
        return x[:, 0], {"hist": hist, "t": t + 1, "enc": enc}


def conv_decoder_forward(tokens, enc, params: ConvDecoder):
    return params.forward(tokens, enc)


def transformer_decoder_forward(tokens, enc, params: TransformerDecoder):
    return params.forward(tokens, enc)

