"""Task wirings over the shared stages: captioning, VLP, VQA, retrieval and VCR.

Multi-stream tasks encode the image with the visual encoder and the sentence
with the sentence encoder (``[pipeline] text_encoder``, default: the visual
encoder family).  The *holistic* image-sentence representation is the
concatenation of the pooled visual states and the pooled sentence states
after cross-modal interaction: co-attention runs its paired blocks, any
other interaction adds its attended context to the sentence states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import PAD, RESERVED, TokenSequence, VisualTokens, ceil_count
from .decoders import LogitsHead
from .encoders import EncoderOutput
from .errors import ConfigError, DomainError, ShapeError
from .interaction import CoAttention
from .layers import Linear, const, masked_mean
from .training import cross_entropy_loss

UNK_ID = RESERVED.index("<unk>")


# ---------------------------------------------------------------- heads

class VLPHeads:
    """Masked-token classifier used by the MLM objective."""

    def __init__(self, scope, ctx):
        self.mlm = LogitsHead(scope.sub("mlm"), ctx.d_dec, ctx.vocab_size)


@dataclass
class TaskHead:
    kind: str
    classifier: Linear | None = None
    n_outputs: int = 0


def build_task_head(task, scope, cfg, ctx) -> TaskHead:
    width = 2 * ctx.d_dec
    if task == "vqa":
        n = int(cfg.get("vqa", "n_answers", 3))
        if n < 1:
            raise ConfigError("[vqa] n_answers must be >= 1")
        return TaskHead("vqa", Linear(scope.sub("head"), width, n), n)
    if task == "vcr":
        return TaskHead("vcr", Linear(scope.sub("head"), width, 1), 1)
    return TaskHead(task)


def vlp_weights(cfg) -> tuple[float, float, float]:
    sec = cfg.section("vlp")
    return (float(sec.get("w_mlm", 1.0)), float(sec.get("w_msg", 1.0)), float(sec.get("w_vsm", 1.0)))


# ----------------------------------------------------------- captioning

def captioning_forward(pipeline, batch, rng=None):
    """Teacher-forced logits ``[B, T-1, V]`` predicting ``text[:, 1:]`` from ``text[:, :-1]``."""
    return pipeline.caption_logits(batch, rng)


# ------------------------------------------------------- two-stream core

def interact(pipeline, vis: EncoderOutput, txt: EncoderOutput):
    """Cross-modal interaction of the two streams; returns updated (visual, sentence) states."""
    inter = pipeline.interaction
    if isinstance(inter, CoAttention):
        return inter.block(vis.states, txt.states, vis.mask, txt.mask)
    return vis.states, txt.states + inter.cross(txt.states, vis)


def holistic(pipeline, batch, ids=None, mask=None, rng=None):
    """Concatenated pooled visual and pooled sentence states, ``[B, 2d]``."""
    ids = batch.text if ids is None else ids
    mask = batch.text_mask if mask is None else mask
    vis = pipeline.encode_visual(batch, rng)
    txt = pipeline.encode_text(ids, mask, rng)
    v, t = interact(pipeline, vis, txt)
    return T.concat([masked_mean(v, vis.mask), masked_mean(t, np.asarray(mask, bool))], axis=-1)


# ------------------------------------------------------------------ MLM

def mask_tokens(ids, mask, rate: float, vocab_size: int, rng):
    """80/10/10 corruption of ``ceil(rate * L)`` word positions per sentence.

    Returns corrupted ids and a boolean map of the chosen positions.
    """
    ids = np.array(ids, dtype=np.int64)
    chosen = np.zeros(ids.shape, dtype=bool)
    n_fixed = len(RESERVED)
    for b in range(ids.shape[0]):
        words = np.flatnonzero(np.asarray(mask[b], bool) & (ids[b] >= n_fixed))
        k = ceil_count(rate, len(words))
        if k == 0:
            continue
        picks = np.sort(rng.permutation(words)[:k])
        for pos in picks:
            u = rng.random()
            if u < 0.8:
                ids[b, pos] = UNK_ID
            elif u < 0.9 and vocab_size > n_fixed:
                ids[b, pos] = int(rng.integers(n_fixed, vocab_size))
        chosen[b, picks] = True
    return ids, chosen


def mlm_loss(pipeline, batch, mask_rate: float, rng):
    if not 0.0 <= mask_rate < 1.0:
        raise DomainError(f"mask_rate must be in [0, 1), got {mask_rate}")
    corrupted, chosen = mask_tokens(batch.text, batch.text_mask, mask_rate, len(pipeline.vocab), rng)
    if not chosen.any():
        return T.tensor(0.0)
    vis = pipeline.encode_visual(batch)
    txt = pipeline.encode_text(corrupted, batch.text_mask)
    _, t = interact(pipeline, vis, txt)
    logits = pipeline.pretraining.mlm(t)
    targets = np.where(chosen, batch.text, PAD)
    lp = T.pick(T.log_softmax(logits), targets)
    return -T.sum(lp * const(chosen / chosen.sum()))


# ------------------------------------------------- masked sentence generation

def mask_span(ids, mask, rate: float, rng):
    """Replace one contiguous span of ``ceil(rate * L)`` words with <unk>."""
    ids = np.array(ids, dtype=np.int64)
    n_fixed = len(RESERVED)
    for b in range(ids.shape[0]):
        words = np.flatnonzero(np.asarray(mask[b], bool) & (ids[b] >= n_fixed))
        k = ceil_count(rate, len(words))
        if k == 0:
            continue
        start = int(rng.integers(0, len(words) - k + 1))
        ids[b, words[start:start + k]] = UNK_ID
    return ids


def masked_sentence_generation_loss(pipeline, batch, span_rate: float, rng):
    """Reconstruct the sentence from visual states plus the span-corrupted sentence."""
    if not 0.0 <= span_rate <= 1.0:
        raise DomainError(f"span_rate must be in [0, 1], got {span_rate}")
    corrupted = mask_span(batch.text, batch.text_mask, span_rate, rng)
    vis = pipeline.encode_visual(batch)
    txt = pipeline.encode_text(corrupted, batch.text_mask)
    enc = EncoderOutput.from_states(T.concat([vis.states, txt.states], axis=1),
                                    np.concatenate([vis.mask, batch.text_mask], axis=1))
    logits = pipeline.logits_for(batch, batch.text[:, :-1], enc=enc)
    return cross_entropy_loss(logits, batch.text[:, 1:], batch.text_mask[:, 1:])


# ----------------------------------------------------- visual-sentence matching

def pooled_pair(pipeline, batch, rng=None):
    """Pooled visual and pooled sentence encodings (no cross interaction), ``[B, d]`` each."""
    vis = pipeline.encode_visual(batch, rng)
    txt = pipeline.encode_text(batch.text, batch.text_mask, rng)
    return vis.global_, txt.global_


def matching_loss(v, s):
    """Symmetric in-batch cross entropy of ``S = v s^T`` with the diagonal as targets."""
    B = v.shape[0]
    scores = T.matmul(v, T.transpose(s))
    diag = np.arange(B)
    rows = -T.mean(T.pick(T.log_softmax(scores, axis=-1), diag))
    cols = -T.mean(T.pick(T.log_softmax(T.transpose(scores), axis=-1), diag))
    return T.scale(rows + cols, 0.5)


def visual_sentence_matching_loss(pipeline, batch, rng=None):
    v, s = pooled_pair(pipeline, batch, rng)
    return matching_loss(v, s)


# ----------------------------------------------------------------- VLP step

def vlp_pretrain_step(pipeline, batch, weights, rng):
    """``w_mlm * MLM + w_msg * MSG + w_vsm * VSM``.

    Each objective draws from its own generator seeded from ``rng`` so the
    combination is exactly linear in the weights.
    """
    w_mlm, w_msg, w_vsm = (float(w) for w in weights)
    if min(w_mlm, w_msg, w_vsm) < 0:
        raise DomainError("objective weights must be nonnegative")
    s_mlm, s_msg = rng.integers(0, 2 ** 63 - 1, size=2)
    sec = pipeline.cfg.section("vlp")
    terms = []
    if w_mlm:
        terms.append(T.scale(mlm_loss(pipeline, batch, float(sec.get("mask_rate", 0.15)),
                                      np.random.default_rng(int(s_mlm))), w_mlm))
    if w_msg:
        terms.append(T.scale(masked_sentence_generation_loss(
            pipeline, batch, float(sec.get("span_rate", 0.3)), np.random.default_rng(int(s_msg))), w_msg))
    if w_vsm:
        terms.append(T.scale(visual_sentence_matching_loss(pipeline, batch), w_vsm))
    if not terms:
        return T.tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# ----------------------------------------------------------------------- VQA

def _head(pipeline, kind):
    head = pipeline.task_head
    if head.kind != kind:
        raise ConfigError(f"pipeline was built for task {head.kind}, not {kind}")
    return head


def vqa_logits(pipeline, batch, rng=None):
    return _head(pipeline, "vqa").classifier(holistic(pipeline, batch, rng=rng))


def vqa_loss(pipeline, batch, rng=None):
    if batch.answers is None:
        raise ConfigError("vqa training examples need answers")
    logits = vqa_logits(pipeline, batch, rng)
    return cross_entropy_loss(T.reshape(logits, (1,) + logits.shape), batch.answers[None])


def _single(image: VisualTokens, text: TokenSequence):
    from .data import Example, collate
    return collate([Example("0", image, text)])


def vqa_predict(pipeline, image: VisualTokens, question: TokenSequence, n_answers: int | None = None):
    """Answer id (lowest id on ties) and the softmax score vector."""
    head = _head(pipeline, "vqa")
    if n_answers is not None and n_answers != head.n_outputs:
        raise ShapeError(f"head has {head.n_outputs} answers, asked for {n_answers}")
    with T.no_grad():
        scores = T.softmax(vqa_logits(pipeline, _single(image, question)), axis=-1).data[0]
    return int(np.argmax(scores)), scores


def vqa_accuracy(pipeline, batch) -> float:
    with T.no_grad():
        pred = np.argmax(vqa_logits(pipeline, batch).data, axis=-1)
    return float((pred == batch.answers).mean())


# ----------------------------------------------------------------- retrieval

def retrieval_scores(pipeline, images, captions) -> np.ndarray:
    """``S[i, j] = <pooled image_i, pooled caption_j>``."""
    from .data import Example, collate
    if not images or not captions:
        raise ShapeError("retrieval needs nonempty image and caption lists")
    with T.no_grad():
        vis = pipeline.encode_visual(collate([Example(str(i), v) for i, v in enumerate(images)]))
        n = max(len(c) for c in captions)
        ids = np.full((len(captions), n), PAD, dtype=np.int64)
        mask = np.zeros((len(captions), n), dtype=bool)
        for j, c in enumerate(captions):
            ids[j, :len(c)] = c.ids
            mask[j, :len(c)] = c.mask
        txt = pipeline.encode_text(ids, mask)
        return vis.global_.data @ txt.global_.data.T


def recall_at_k(scores, k: int) -> float:
    """Share of rows whose own column is among the top ``k`` (ties: lower column first)."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    hits = 0
    for i in range(n):
        row = scores[i]
        rank = int((row > row[i]).sum() + (row[:i] == row[i]).sum())
        hits += rank < k
    return hits / n


# ----------------------------------------------------------------------- VCR

def vcr_score(pipeline, image: VisualTokens, question: TokenSequence, choices):
    """Choice id (lowest on ties) and softmax over the four (question + choice) scores."""
    choices = list(choices)
    if len(choices) != 4:
        raise ShapeError(f"vcr needs exactly 4 choices, got {len(choices)}")
    head = _head(pipeline, "vcr")
    q = [i for i, m in zip(question.ids, question.mask) if m]
    logits = []
    with T.no_grad():
        for c in choices:
            tail = [i for i, m in zip(c.ids, c.mask) if m][1:]
            ids = q + tail
            seq = TokenSequence(ids, [True] * len(ids))
            logits.append(head.classifier(holistic(pipeline, _single(image, seq))).data[0, 0])
    z = np.array(logits) - max(logits)
    scores = np.exp(z) / np.exp(z).sum()
    return int(np.argmax(scores)), scores
