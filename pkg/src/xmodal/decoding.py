"""Decode strategies: greedy decoding and beam search with a completed pool.

Both work with any *step model*: an object exposing

* ``start(inputs) -> state`` for a batch of one or more inputs,
* ``step(state, tokens) -> (log_probs [B, V] ndarray, state)``,
* ``select(state, rows) -> state``.

:class:`~xmodal.pipeline.Pipeline` implements this protocol, and so do the
toy models used in tests.  ``max_len`` counts generated tokens (the leading
``<bos>`` is not counted, a terminal ``<eos>`` is).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import BOS, EOS, PAD, UNK, TokenSequence
from .errors import ConfigError, UsageError

EXCLUDED = (PAD, BOS, UNK)


@dataclass
class Hypothesis:
    ids: list[int]
    logp: float = 0.0
    finished: bool = False
    row: int = 0

    @property
    def length(self) -> int:
        return len(self.ids) - 1


def _masked(logp: np.ndarray) -> np.ndarray:
    logp = np.array(logp, dtype=np.float64)
    logp[:, list(EXCLUDED)] = -np.inf
    return logp


def _sequence(ids) -> TokenSequence:
    return TokenSequence(list(ids), [True] * len(ids))


def greedy_batch(model, inputs, max_len: int) -> list[list[int]]:
    """Greedy ids (with leading <bos>) for every input in the batch."""
    if max_len < 1:
        raise UsageError("max_len must be >= 1")
    state = model.start(inputs)
    B = model.batch_size(state)
    out = [[BOS] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    tokens = np.full(B, BOS, dtype=np.int64)
    for _ in range(max_len):
        logp, state = model.step(state, tokens)
        tokens = np.argmax(_masked(logp), axis=-1)  # first maximum == lowest id
        for b in np.flatnonzero(~done):
            out[b].append(int(tokens[b]))
        done |= tokens == EOS
        if done.all():
            break
    return out


def greedy_decode(model, visual, max_len: int) -> TokenSequence:
    return _sequence(greedy_batch(model, visual, max_len)[0])


def _norm(logp: float, length: int, alpha: float) -> float:
    return logp if alpha == 0 else logp / length ** alpha


@dataclass
class BeamResult:
    best: TokenSequence
    n_best: list[Hypothesis] = field(default_factory=list)


def beam_search(model, visual, width: int, max_len: int, alpha: float = 0.0,
                return_all: bool = False):
    """Keep the ``width`` best partial sentences by accumulated log-probability.

    Finished hypotheses move to a completed pool; the answer maximizes
    ``logp / length**alpha`` over completed and live hypotheses, ties going to
    the lexicographically smallest id sequence.
    """
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    if alpha < 0:
        raise ConfigError("length-normalization alpha must be >= 0")
    if max_len < 1:
        raise UsageError("max_len must be >= 1")
    state = model.start(visual)
    live = [Hypothesis([BOS])]
    completed: list[Hypothesis] = []
    for _ in range(max_len):
        logp, state = model.step(state, np.array([h.ids[-1] for h in live], dtype=np.int64))
        logp = _masked(logp)
        cands = []
        for r, h in enumerate(live):
            for tok in np.flatnonzero(np.isfinite(logp[r])):
                cands.append((h.logp + float(logp[r, tok]), h.ids + [int(tok)], r))
        cands.sort(key=lambda c: (-c[0], c[1]))
        next_live, rows = [], []
        for score, ids, r in cands[:width]:
            if ids[-1] == EOS:
                completed.append(Hypothesis(ids, score, True))
            else:
                next_live.append(Hypothesis(ids, score, False, len(rows)))
                rows.append(r)
        live = next_live
        if not live:
            break
        state = model.select(state, np.array(rows, dtype=np.int64))
        if completed:
            best_done = max(_norm(h.logp, h.length, alpha) for h in completed)
            bound = max(h.logp / max_len ** alpha if alpha else h.logp for h in live)
            if best_done > bound:
                break
    pool = completed + live
    pool.sort(key=lambda h: (-_norm(h.logp, h.length, alpha), h.ids))
    best = _sequence(pool[0].ids)
    return BeamResult(best, pool) if return_all else best


class GreedyStrategy:
    name = "greedy"

    def __init__(self, max_len=16):
        self.max_len = max_len

    def decode_batch(self, model, inputs) -> list[list[int]]:
        return greedy_batch(model, inputs, self.max_len)


class BeamStrategy:
    name = "beam"

    def __init__(self, width=3, max_len=16, alpha=0.0):
        if width < 1:
            raise ConfigError(f"[decode] beam must be >= 1, got {width}")
        self.width, self.max_len, self.alpha = width, max_len, alpha

    def decode_batch(self, model, inputs) -> list[list[int]]:
        return [beam_search(model, single, self.width, self.max_len, self.alpha).ids
                for single in model.split(inputs)]


def exhaustive_best(model, visual, vocab_size: int, max_len: int, alpha: float = 0.0) -> list[int]:
    """Brute-force argmax over every well-formed sequence (test oracle)."""
    allowed = [t for t in range(vocab_size) if t not in EXCLUDED]
    best_key, best_ids = None, None

    def visit(ids, logp, state):
        nonlocal best_key, best_ids
        if len(ids) - 1 == max_len or ids[-1] == EOS:
            key = (-_norm(logp, len(ids) - 1, alpha), ids)
            if best_key is None or key < best_key:
                best_key, best_ids = key, ids
            return
        lp, nxt = model.step(state, np.array([ids[-1]], dtype=np.int64))
        for tok in allowed:
            visit(ids + [tok], logp + float(lp[0, tok]), nxt)

    visit([BOS], 0.0, model.start(visual))
    return best_ids

