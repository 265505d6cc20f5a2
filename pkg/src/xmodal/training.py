"""Training strategies, the Adam optimizer and the deterministic training loop.

Strategies (``[training] strategy``):

* ``ce``: token cross entropy under teacher forcing;
* ``label_smoothing``: ``(1-eps) * nll + (eps/V) * sum_k -log p_k``;
* ``scheduled_sampling``: inputs drawn from ground truth with probability
  ``p_tf = max(p_min, 1 - k * epoch)``, otherwise the model's own argmax;
* ``scst``: self-critical policy gradient, baseline = greedy caption reward.

Per-step randomness (dropout, coins, sampling) comes from
``default_rng([seed, step, 1])`` so runs replay bit for bit.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, batches, detokenize, split_words
from .decoding import EXCLUDED, greedy_batch
from .errors import ConfigError, DegenerateInputError, DomainError, NumericError
from .layers import const
from .metrics import CiderD, bleu4


# -------------------------------------------------------------------- losses

def _token_weights(mask: np.ndarray) -> np.ndarray:
    """Per-position weights giving a mean over real tokens (per example, then over the batch)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        if not mask.any():
            raise DegenerateInputError("cross entropy over an all-masked sequence")
        return mask / mask.sum()
    counts = mask.sum(-1)
    if (counts == 0).any():
        raise DegenerateInputError(f"example {int(np.flatnonzero(counts == 0)[0])} has no real tokens")
    return mask / counts[:, None] / mask.shape[0]


def cross_entropy_loss(logits, targets, mask=None):
    """Mean of ``-log softmax(logits)[target]`` over unmasked positions.

    ``logits`` is ``[T, V]`` or ``[B, T, V]``; batched losses average each
    example's token mean, so a collated batch scores like its examples.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    picked = T.pick(T.log_softmax(logits), targets)
    return -T.sum(picked * const(_token_weights(mask)))


def label_smoothing_loss(logits, targets, mask=None, epsilon: float = 0.1):
    if not 0.0 <= epsilon < 1.0:
        raise DomainError(f"label smoothing epsilon must be in [0, 1), got {epsilon}")
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    V = logits.shape[-1]
    lp = T.log_softmax(logits)
    per = T.scale(T.pick(lp, targets), 1.0 - epsilon) + T.scale(T.sum(lp, axis=-1), epsilon / V)
    return -T.sum(per * const(_token_weights(mask)))


def scheduled_sampling_prob(epoch: int, k: float, p_min: float) -> float:
    if k < 0 or not 0.0 <= p_min <= 1.0:
        raise DomainError("scheduled sampling needs k >= 0 and p_min in [0, 1]")
    return max(p_min, 1.0 - k * epoch)


def _masked_argmax(logp: np.ndarray) -> np.ndarray:
    logp = np.array(logp)
    logp[:, list(EXCLUDED)] = -np.inf
    return np.argmax(logp, axis=-1)


def scheduled_sampling_inputs(pipeline, batch, p_tf: float, rng) -> np.ndarray:
    """Decoder inputs where each position after the first keeps the ground truth
    with probability ``p_tf`` and otherwise takes the previous-step argmax."""
    gold = batch.text[:, :-1]
    B, L = gold.shape
    coins = rng.random((L, B)) < p_tf
    inputs = gold.copy()
    if coins[1:].all():
        return inputs
    state = pipeline.start(batch)
    for t in range(L - 1):
        logp, state = pipeline.step(state, inputs[:, t])
        own = _masked_argmax(logp)
        inputs[:, t + 1] = np.where(coins[t + 1], gold[:, t + 1], own)
    return inputs


def scheduled_sampling_step(pipeline, batch, p_tf: float, rng, dropout_rng=None):
    if not 0.0 <= p_tf <= 1.0:
        raise DomainError(f"teacher-forcing probability must be in [0, 1], got {p_tf}")
    inputs = scheduled_sampling_inputs(pipeline, batch, p_tf, rng)
    logits = pipeline.logits_for(batch, inputs, dropout_rng)
    return cross_entropy_loss(logits, batch.text[:, 1:], batch.text_mask[:, 1:])


# ---------------------------------------------------------------------- scst

def sample_captions(pipeline, batch, max_len: int, rng) -> list[list[int]]:
    """Per-step multinomial samples (reserved ids excluded), each starting with <bos>."""
    state = pipeline.start(batch)
    B = pipeline.batch_size(state)
    out = [[BOS] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    tokens = np.full(B, BOS, dtype=np.int64)
    for _ in range(max_len):
        logp, state = pipeline.step(state, tokens)
        p = np.exp(logp)
        p[:, list(EXCLUDED)] = 0.0
        cdf = np.cumsum(p, axis=-1)
        u = rng.random(B) * cdf[:, -1]
        tokens = np.minimum((cdf <= u[:, None]).sum(-1), p.shape[1] - 1)
        for b in np.flatnonzero(~done):
            out[b].append(int(tokens[b]))
        done |= tokens == EOS
        if done.all():
            break
        tokens = np.where(done, EOS, tokens)
    return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("XMODAL_THREADS", "1")))
    except ValueError:
        return 1


def compute_rewards(reward_fn, captions, refs) -> np.ndarray:
    """Rewards in input order; up to XMODAL_THREADS worker threads."""
    n = _threads()
    if n == 1:
        return np.array([reward_fn(c, r) for c, r in zip(captions, refs)], dtype=np.float64)
    with ThreadPoolExecutor(max_workers=n) as pool:
        return np.array(list(pool.map(reward_fn, captions, refs)), dtype=np.float64)


def sequence_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Pad id lists (each starting with <bos>) and mark generated tokens through the first <eos>."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), L - 1), dtype=bool)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
        mask[b, :len(s) - 1] = True
    return ids, mask


def policy_gradient_loss(pipeline, batch, seqs, advantages):
    """``mean_b -A_b * sum_t log p(seq_bt)`` with the sequences recomputed under teacher forcing."""
    ids, mask = sequence_batch(seqs)
    logits = pipeline.logits_for(batch, ids[:, :-1])
    picked = T.pick(T.log_softmax(logits), ids[:, 1:])
    weights = np.asarray(advantages, dtype=np.float64)[:, None] * mask / len(seqs)
    return -T.sum(picked * const(weights))


def scst_loss(pipeline, batch, reward_fn, rng, max_len: int = 16):
    """Self-critical loss and the mean sampled reward.

    ``reward_fn(words, ref_word_lists) -> float``.
    """
    with T.no_grad():
        sampled = sample_captions(pipeline, batch, max_len, rng)
        greedy = greedy_batch(pipeline, batch, max_len)
    vocab = pipeline.vocab
    refs = [[split_words(r) for r in rs] for rs in batch.refs]
    words = [split_words(detokenize(s, vocab)) for s in sampled + greedy]
    rewards = compute_rewards(reward_fn, words, refs + refs)
    B = len(sampled)
    r_s, r_g = rewards[:B], rewards[B:]
    return policy_gradient_loss(pipeline, batch, sampled, r_s - r_g), float(r_s.mean())


def make_reward(kind: str, ref_corpus):
    """``cider`` (CIDEr-D with document frequencies from ``ref_corpus``) or ``bleu4``."""
    if kind == "cider":
        return CiderD([[split_words(r) for r in refs] for refs in ref_corpus]).score
    if kind == "bleu4":
        return bleu4
    raise ConfigError(f"[training] reward must be cider or bleu4, got {kind!r}")


# ----------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, clip: float | None = None) -> None:
    """Bias-corrected Adam on ``params[name].data``; ``None`` grads leave a parameter alone."""
    live = {k: np.asarray(g, dtype=np.float64) for k, g in grads.items() if g is not None}
    for k, g in live.items():
        if g.shape != params[k].shape:
            raise ConfigError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {k}")
    if clip:
        # scale by the largest entry first so squaring cannot overflow
        top = max((float(np.abs(g).max()) for g in live.values() if g.size), default=0.0)
        norm = top * math.sqrt(sum(float(((g / top) ** 2).sum()) for g in live.values())) if top else 0.0
        if norm > clip:
            live = {k: g * (clip / norm) for k, g in live.items()}
    state.t += 1
    c1, c2 = 1.0 - beta1 ** state.t, 1.0 - beta2 ** state.t
    for k in sorted(live):
        g = live[k]
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        params[k].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- strategies

@dataclass
class StepContext:
    step: int
    epoch: int
    rng: np.random.Generator


class CrossEntropyStrategy:
    name = "ce"

    def prepare(self, pipeline, examples):
        pass

    def loss(self, pipeline, batch, ctx: StepContext):
        logits = pipeline.caption_logits(batch, ctx.rng)
        return cross_entropy_loss(logits, batch.text[:, 1:], batch.text_mask[:, 1:]), 1.0, None


class LabelSmoothingStrategy(CrossEntropyStrategy):
    name = "label_smoothing"

    def __init__(self, epsilon=0.1):
        if not 0.0 <= epsilon < 1.0:
            raise ConfigError(f"[training] epsilon must be in [0, 1), got {epsilon}")
        self.epsilon = float(epsilon)

    def loss(self, pipeline, batch, ctx):
        logits = pipeline.caption_logits(batch, ctx.rng)
        return label_smoothing_loss(logits, batch.text[:, 1:], batch.text_mask[:, 1:], self.epsilon), 1.0, None


class ScheduledSamplingStrategy(CrossEntropyStrategy):
    name = "scheduled_sampling"

    def __init__(self, k=0.05, p_min=0.25):
        scheduled_sampling_prob(0, k, p_min)
        self.k, self.p_min = float(k), float(p_min)

    def loss(self, pipeline, batch, ctx):
        p_tf = scheduled_sampling_prob(ctx.epoch, self.k, self.p_min)
        return scheduled_sampling_step(pipeline, batch, p_tf, ctx.rng, ctx.rng), p_tf, None


class SCSTStrategy(CrossEntropyStrategy):
    name = "scst"

    def __init__(self, reward="cider", max_len=16):
        if reward not in ("cider", "bleu4"):
            raise ConfigError(f"[training] reward must be cider or bleu4, got {reward!r}")
        self.reward, self.max_len = reward, int(max_len)
        self.reward_fn = None

    def prepare(self, pipeline, examples):
        self.reward_fn = make_reward(self.reward, [e.refs for e in examples])

    def loss(self, pipeline, batch, ctx):
        loss, reward = scst_loss(pipeline, batch, self.reward_fn, ctx.rng, self.max_len)
        return loss, 1.0, reward


# ---------------------------------------------------------------------- loop

@dataclass
class TrainRecord:
    step: int
    loss: float
    learning_rate: float
    teacher_forcing_prob: float = 1.0
    reward_mean: float | None = None

    def line(self) -> str:
        parts = [str(self.step), repr(self.loss), repr(self.learning_rate), repr(self.teacher_forcing_prob)]
        if self.reward_mean is not None:
            parts.append(repr(self.reward_mean))
        return "\t".join(parts)


@dataclass
class TrainResult:
    checkpoint: Path | None
    records: list[TrainRecord]


def task_loss(pipeline, batch, ctx: StepContext):
    """Loss, teacher-forcing probability and reward for the pipeline's task."""
    from . import tasks
    if pipeline.task == "captioning":
        return pipeline.training_strategy.loss(pipeline, batch, ctx)
    if pipeline.task == "vlp":
        return tasks.vlp_pretrain_step(pipeline, batch, tasks.vlp_weights(pipeline.cfg), ctx.rng), 1.0, None
    if pipeline.task == "vqa":
        return tasks.vqa_loss(pipeline, batch, ctx.rng), 1.0, None
    if pipeline.task == "retrieval":
        return tasks.visual_sentence_matching_loss(pipeline, batch, ctx.rng), 1.0, None
    raise ConfigError("task vcr has no training objective in this framework; build it for scoring only")


def train_loop(pipeline, examples, cfg=None, seed: int | None = None, out_dir=None,
               on_record=None, steps: int | None = None) -> TrainResult:
    """Run ``[training] steps`` optimizer steps; write XTNS checkpoints to ``out_dir``.

    Shuffling is keyed by ``(seed, epoch)``; the loss check aborts with the
    step number on any non-finite value.
    """
    from .checkpoint import save_checkpoint
    cfg = cfg or pipeline.cfg
    seed = pipeline.seed if seed is None else int(seed)
    tr = cfg.section("training")
    lr = float(tr.get("lr", 1e-2))
    total = int(tr.get("steps", 100) if steps is None else steps)
    batch_size = int(tr.get("batch_size", 32))
    clip = tr.get("clip")
    save_every = int(tr.get("save_every", 0))
    beta1, beta2 = float(tr.get("beta1", 0.9)), float(tr.get("beta2", 0.999))
    if batch_size < 1 or not examples:
        raise ConfigError("[training] batch_size must be >= 1 and the dataset nonempty")
    start_step = int(getattr(pipeline, "step_count", 0))
    pipeline.training_strategy.prepare(pipeline, examples)
    params = dict(pipeline.named_parameters())
    opt = getattr(pipeline, "optimizer_state", None) or OptimizerState()
    pipeline.optimizer_state = opt
    per_epoch = math.ceil(len(examples) / batch_size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = open(out / "train_log.tsv", "a", encoding="utf-8", newline="\n") if out is not None else None
    records = []
    epoch_iter, epoch = None, None
    try:
        for i in range(total):
            step = start_step + i
            e = step // per_epoch
            if e != epoch or epoch_iter is None:
                epoch, epoch_iter = e, iter(list(batches(examples, batch_size, seed, e)))
                for _ in range(step % per_epoch):
                    next(epoch_iter)
            batch = next(epoch_iter)
            ctx = StepContext(step, epoch, np.random.default_rng([seed, step, 1]))
            pipeline.store.zero_grads()
            try:
                loss, p_tf, reward = task_loss(pipeline, batch, ctx)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"loss is {value}")
                T.backward(loss)
                adam_step(params, {k: p.grad for k, p in params.items()}, opt, lr, beta1, beta2,
                          clip=float(clip) if clip else None)
                pipeline.store.quantize_()
            except NumericError as exc:
                T.default_tape().clear()
                raise NumericError(f"step {step + 1}: {exc}") from exc
            pipeline.step_count = step + 1
            rec = TrainRecord(step + 1, value, lr, p_tf, reward)
            records.append(rec)
            if log is not None:
                log.write(rec.line() + "\n")
            if on_record is not None:
                on_record(rec)
            if out is not None and save_every and (step + 1) % save_every == 0:
                save_checkpoint(out / f"ckpt_{step + 1:06d}.xtns", pipeline)
    finally:
        if log is not None:
            log.close()
    ckpt = None
    if out is not None:
        ckpt = out / "final.xtns"
        save_checkpoint(ckpt, pipeline)
    return TrainResult(ckpt, records)
