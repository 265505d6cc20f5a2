import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xmodal import tensor as T
from xmodal.data import BOS, EOS, collate
from xmodal.decoding import greedy_batch
from xmodal.errors import DegenerateInputError, DomainError, NumericError
from xmodal.tensor import Tensor
from xmodal.training import (OptimizerState, TrainRecord, adam_step, cross_entropy_loss,
                             label_smoothing_loss, policy_gradient_loss, scheduled_sampling_inputs,
                             scheduled_sampling_prob, scheduled_sampling_step, scst_loss, train_loop)
from tests.conftest import make_config, make_pipeline


def test_cross_entropy_examples():
    confident = np.full((3, 5), -10.0)
    confident[np.arange(3), [1, 4, 2]] = 10.0
    assert cross_entropy_loss(Tensor(confident), [1, 4, 2]).item() < 1e-6
    assert math.isclose(cross_entropy_loss(Tensor(np.zeros((2, 4))), [0, 3]).item(), math.log(4), abs_tol=1e-15)
    half = Tensor(np.log([[0.5, 0.25, 0.25]]))
    assert math.isclose(cross_entropy_loss(half, [0]).item(), math.log(2), abs_tol=1e-15)


def test_cross_entropy_masking(rng):
    logits = rng.normal(size=(4, 6))
    full = cross_entropy_loss(Tensor(logits[:2]), [1, 2]).item()
    masked = cross_entropy_loss(Tensor(logits), [1, 2, 0, 0], [True, True, False, False]).item()
    assert math.isclose(full, masked, rel_tol=1e-15)
    with pytest.raises(DegenerateInputError):
        cross_entropy_loss(Tensor(logits), [0] * 4, [False] * 4)


def test_label_smoothing_examples():
    p = Tensor(np.log([[0.7, 0.2, 0.1]]))
    expect = 0.9 * -math.log(0.7) + (0.1 / 3) * -(math.log(0.7) + math.log(0.2) + math.log(0.1))
    got = label_smoothing_loss(p, [0], epsilon=0.1).item()
    assert math.isclose(got, expect, abs_tol=1e-12) and abs(got - 0.46330) < 1e-4
    for eps in (0.0, 0.3, 0.9):
        assert math.isclose(label_smoothing_loss(Tensor(np.zeros((2, 7))), [1, 5], epsilon=eps).item(),
                            math.log(7), abs_tol=1e-14)
    with pytest.raises(DomainError):
        label_smoothing_loss(p, [0], epsilon=1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5), st.integers(2, 9))
def test_label_smoothing_without_epsilon_is_cross_entropy(seed, L, V):
    r = np.random.default_rng(seed)
    logits = r.normal(0, 3, size=(2, L, V))
    tgt = r.integers(0, V, size=(2, L))
    mask = r.random((2, L)) < 0.7
    mask[:, 0] = True
    assert (label_smoothing_loss(Tensor(logits), tgt, mask, 0.0).item()
            == cross_entropy_loss(Tensor(logits), tgt, mask).item())


def test_scheduled_sampling_prob_examples():
    assert scheduled_sampling_prob(0, 0.05, 0.0) == 1.0
    assert math.isclose(scheduled_sampling_prob(10, 0.05, 0.0), 0.5)
    assert scheduled_sampling_prob(100, 0.05, 0.25) == 0.25


@given(st.floats(0, 2), st.floats(0, 1), st.integers(0, 500))
def test_scheduled_sampling_prob_is_bounded_and_non_increasing(k, p_min, epoch):
    p, q = scheduled_sampling_prob(epoch, k, p_min), scheduled_sampling_prob(epoch + 1, k, p_min)
    assert p_min <= q <= p <= 1.0


@pytest.fixture(scope="module")
def small_pipe():
    return make_pipeline(hidden=8)


@pytest.fixture(scope="module")
def small_batch(shape_examples):
    return collate(shape_examples[:4])


def test_scheduled_sampling_full_teacher_forcing_is_cross_entropy(small_pipe, small_batch):
    ss = scheduled_sampling_step(small_pipe, small_batch, 1.0, np.random.default_rng(0)).item()
    T.default_tape().clear()
    ce = cross_entropy_loss(small_pipe.caption_logits(small_batch), small_batch.text[:, 1:],
                            small_batch.text_mask[:, 1:]).item()
    T.default_tape().clear()
    assert ss == ce


def test_scheduled_sampling_free_running_feeds_own_argmax(small_pipe, small_batch):
    inputs = scheduled_sampling_inputs(small_pipe, small_batch, 0.0, np.random.default_rng(0))
    greedy = greedy_batch(small_pipe, small_batch, inputs.shape[1] - 1)
    for row, ids in zip(inputs, greedy):
        assert row[0] == BOS
        n = min(len(ids), len(row))
        assert row[:n].tolist() == ids[:n]


def test_scheduled_sampling_is_deterministic(small_pipe, small_batch):
    vals = []
    for _ in range(2):
        vals.append(scheduled_sampling_step(small_pipe, small_batch, 0.5, np.random.default_rng(42)).item())
        T.default_tape().clear()
    assert vals[0] == vals[1]


def test_policy_gradient_hand_example():
    pipe = make_pipeline(hidden=8)
    V = len(pipe.vocab)
    pipe.head.w.data[...] = 0.0
    b = np.full(V, math.log((1 - 2 / math.e) / (V - 2)))
    a = pipe.vocab.id("red")
    b[[a, EOS]] = -1.0
    pipe.head.b.data[...] = b
    batch = collate([pipe_example(pipe)])
    loss = policy_gradient_loss(pipe, batch, [[BOS, a, EOS]], [0.8 - 0.5])
    T.default_tape().clear()
    assert math.isclose(loss.item(), 0.6, abs_tol=1e-12)


def pipe_example(pipe):
    from xmodal.data import caption_examples, make_synthetic_dataset
    return caption_examples(make_synthetic_dataset(0, 1), pipe.vocab)[0]


def test_scst_zero_advantage_gives_zero_gradient(small_batch):
    pipe = make_pipeline(hidden=8)
    pipe.store.zero_grads()
    loss, reward = scst_loss(pipe, small_batch, lambda c, r: 0.7, np.random.default_rng(0), 8)
    assert reward == 0.7 and loss.item() == 0.0
    T.backward(loss)
    for name, p in pipe.named_parameters():
        assert p.grad is None or not p.grad.any(), name


def test_scst_loss_sign_follows_advantage(small_batch):
    pipe = make_pipeline(hidden=8)
    # reward longer captions: sampled captions differ from greedy, so the loss is nonzero
    loss, _ = scst_loss(pipe, small_batch, lambda c, r: float(len(c)), np.random.default_rng(3), 8)
    assert loss.item() != 0.0
    T.default_tape().clear()


def test_adam_examples():
    theta = Tensor(np.array(1.0), requires_grad=True)
    adam_step({"t": theta}, {"t": np.array(0.0)}, OptimizerState(), 0.1)
    assert theta.item() == 1.0
    adam_step({"t": theta}, {"t": np.array(1.0)}, OptimizerState(), 0.1)
    assert math.isclose(theta.item(), 1.0 - 0.1 / (1 + 1e-8), rel_tol=0, abs_tol=1e-15)
    a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(2), requires_grad=True)
    state = OptimizerState()
    adam_step({"a": a, "b": b}, {"a": np.array([6.0, 0.0]), "b": np.array([0.0, 8.0])}, state, 0.1, clip=1.0)
    assert np.allclose(state.m["a"], 0.1 * np.array([0.6, 0.0])) and np.allclose(state.m["b"], [0.0, 0.08])


def test_adam_rejects_non_finite_gradients():
    with pytest.raises(NumericError, match="decoder.w"):
        adam_step({"decoder.w": Tensor(np.zeros(2))}, {"decoder.w": np.array([1.0, np.nan])},
                  OptimizerState(), 0.1)


@given(st.floats(0.5, 5.0), st.floats(-10, 10).filter(lambda x: abs(x - 3.0) > 1e-3), st.floats(1e-3, 0.5))
def test_adam_step_decreases_a_convex_quadratic(a, start, lr):
    lr = min(lr, 0.9 * abs(start - 3.0))
    theta = Tensor(np.array(start), requires_grad=True)
    f = lambda x: a * (x - 3.0) ** 2
    before = f(theta.item())
    adam_step({"x": theta}, {"x": np.array(2 * a * (start - 3.0))}, OptimizerState(), lr)
    assert f(theta.item()) < before


def _train(tmp_path, name, lr=0.01, steps=6, training="ce", seed=0):
    extra = f"[training]\nsteps = {steps}\nsave_every = 3\n"
    cfg = make_config(hidden=8, training=training, extra="")
    cfg.sections["training"].update({"steps": steps, "save_every": 3, "lr": lr, "batch_size": 8})
    from xmodal.pipeline import build_pipeline, load_examples
    pipe = build_pipeline(cfg, seed=seed)
    exs = load_examples(cfg, pipe.vocab)
    return pipe, train_loop(pipe, exs, cfg, seed, tmp_path / name)


def test_train_loop_is_deterministic(tmp_path):
    _, a = _train(tmp_path, "a")
    _, b = _train(tmp_path, "b")
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert [r.loss for r in a.records] == [r.loss for r in b.records]
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == [
        "ckpt_000003.xtns", "ckpt_000006.xtns", "final.xtns", "train_log.tsv"]


@pytest.mark.parametrize("training", ["ce", "label_smoothing", "scheduled_sampling", "scst"])
def test_zero_learning_rate_leaves_parameters_unchanged(tmp_path, training):
    from xmodal.pipeline import build_pipeline
    ref = build_pipeline(make_config(hidden=8, training=training))
    pipe, res = _train(tmp_path, training, lr=0.0, steps=3, training=training)
    for (name, p), (_, q) in zip(pipe.named_parameters(), ref.named_parameters()):
        assert np.array_equal(p.data, q.data), name
    assert all(math.isfinite(r.loss) for r in res.records)


def test_train_log_format(tmp_path):
    _, res = _train(tmp_path, "log", training="scheduled_sampling")
    lines = (tmp_path / "log" / "train_log.tsv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 6
    for k, line in enumerate(lines, 1):
        step, loss, lr, p_tf = line.split("\t")
        assert int(step) == k and float(lr) == 0.01 and 0.0 <= float(p_tf) <= 1.0
        assert float(loss) == res.records[k - 1].loss
    assert TrainRecord(3, 0.5, 0.1, 1.0, 0.25).line() == "3\t0.5\t0.1\t1.0\t0.25"


def test_non_finite_loss_aborts_with_step_number(tmp_path):
    cfg = make_config(hidden=8)
    cfg.sections["training"].update({"steps": 3, "batch_size": 8})
    from xmodal.pipeline import build_pipeline, load_examples
    pipe = build_pipeline(cfg)
    pipe.head.w.data[...] = 1e305
    with pytest.raises(NumericError, match="step 1"):
        train_loop(pipe, load_examples(cfg, pipe.vocab), cfg, 0)


def test_clipping_survives_huge_gradients():
    a = Tensor(np.zeros(2), requires_grad=True)
    state = OptimizerState()
    adam_step({"a": a}, {"a": np.array([3e200, 4e200])}, state, 0.1, clip=1.0)
    assert np.allclose(state.m["a"], 0.1 * np.array([0.6, 0.8]))
