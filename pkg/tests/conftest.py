import numpy as np
import pytest

from xmodal.config import parse_config
from xmodal.data import caption_examples, make_synthetic_dataset, shape_world_vocabulary
from xmodal.pipeline import build_pipeline

BASE_CONFIG = """
[pipeline]
task = {task}
encoder = {encoder}
interaction = {interaction}
decoder = {decoder}
training = {training}
[encoder]
hidden = {hidden}
[decode]
max_len = 10
[training]
lr = 0.01
batch_size = 32
clip = 5.0
"""


def make_config(task="captioning", encoder="self_attention", interaction="x_linear", decoder="lstm",
                training="ce", hidden=16, extra=""):
    text = BASE_CONFIG.format(task=task, encoder=encoder, interaction=interaction, decoder=decoder,
                              training=training, hidden=hidden)
    return parse_config(text + extra)


def make_pipeline(seed=0, **kw):
    return build_pipeline(make_config(**kw), seed=seed)


@pytest.fixture(scope="session")
def vocab():
    return shape_world_vocabulary()


@pytest.fixture(scope="session")
def shape_examples(vocab):
    return caption_examples(make_synthetic_dataset(0, 32), vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class FixedLogitModel:
    """Step model whose log-probabilities depend only on the step index."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)      # [steps, V] logits

    def start(self, inputs):
        return {"t": 0, "B": 1}

    def step(self, state, tokens):
        row = self.table[min(state["t"], len(self.table) - 1)]
        lp = row - np.log(np.exp(row - row.max()).sum()) - row.max()
        B = len(tokens)
        return np.tile(lp, (B, 1)), {"t": state["t"] + 1, "B": B}

    def select(self, state, rows):
        return {"t": state["t"], "B": len(rows)}

    def batch_size(self, state):
        return state["B"]

    def split(self, inputs):
        return [inputs]


class PrefixModel:
    """Step model whose distribution is a random function of the whole prefix."""

    def __init__(self, seed, vocab_size):
        self.seed, self.V = seed, vocab_size

    def _logp(self, prefix):
        h = np.random.default_rng([self.seed, *prefix]).normal(0.0, 2.0, self.V)
        return h - np.log(np.exp(h - h.max()).sum()) - h.max()

    def start(self, inputs):
        return {"prefixes": [[]], "B": 1}

    def step(self, state, tokens):
        prefixes = [p + [int(t)] for p, t in zip(state["prefixes"], tokens)]
        return np.stack([self._logp(p) for p in prefixes]), {"prefixes": prefixes, "B": len(prefixes)}

    def select(self, state, rows):
        return {"prefixes": [list(state["prefixes"][r]) for r in rows], "B": len(rows)}

    def batch_size(self, state):
        return state["B"]

    def split(self, inputs):
        return [inputs]


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
