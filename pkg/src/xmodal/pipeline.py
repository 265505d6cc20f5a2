"""Registry-driven assembly of a full pipeline from a :class:`PipelineConfig`.

Every module is built through :class:`ModuleRegistry` factories with the
signature ``factory(scope, section, ctx)`` where ``section`` is the module's
config section and ``ctx`` a :class:`BuildContext` carrying widths and the
vocabulary size.  Swapping a module is a config edit only.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModuleRegistry, PipelineConfig
from .data import (Batch, Example, VisualTokens, Vocabulary, collate, detokenize,
                   shape_world_vocabulary)
from .decoders import ConvDecoder, LogitsHead, RecurrentDecoder, TransformerDecoder, select_rows
from .decoding import BeamStrategy, GreedyStrategy
from .encoders import (ConvEncoder, EncoderOutput, GCNEncoder, LSTMEncoder, SelfAttentionEncoder,
                       TextEmbedding, VisualEmbedding)
from .errors import ConfigError, UsageError
from .interaction import (AdditiveAttention, CoAttention, MeshedMemoryAttention, TopDownAttention,
                          XLinearAttention)
from .layers import Linear
from .params import ParamStore
from . import training as TR

DEFAULT_HIDDEN = 32
RECURRENT_DECODERS = ("lstm", "gru")


@dataclass
class BuildContext:
    cfg: PipelineConfig
    registry: ModuleRegistry
    vocab_size: int
    d_v: int
    d_enc: int
    d_dec: int
    shared: dict = field(default_factory=dict)

    def make_interaction(self, scope):
        name = self.cfg.stage_choices["interaction"]
        return self.registry.lookup("interaction", name)(scope, self.cfg.section("interaction"), self)

    def shared_interaction(self, scope):
        """The single top-level interaction instance (recurrent decoders, multi-stream tasks)."""
        if "interaction" not in self.shared:
            self.shared["interaction"] = self.make_interaction(scope)
        return self.shared["interaction"]


# ------------------------------------------------------------ stage factories

def _visual_regions(scope, sec, ctx):
    return VisualEmbedding(scope, ctx.d_v, ctx.d_enc, max_pos=sec.get("max_regions", 64),
                           positional=sec.get("positional", True), norm=sec.get("norm", False))


def _encoder_factory(kind):
    def make(scope, sec, ctx, d=None):
        d = d or ctx.d_enc
        layers = sec.get("layers", 1)
        if kind == "lstm":
            return LSTMEncoder(scope, d, layers)
        if kind == "gcn":
            return GCNEncoder(scope, d, layers, sec.get("relations", 3))
        if kind == "conv":
            return ConvEncoder(scope, d, layers, sec.get("kernel", 3))
        return SelfAttentionEncoder(scope, d, layers, sec.get("heads", 2), sec.get("d_ff"))
    return make


def _interaction_factory(kind):
    def make(scope, sec, ctx):
        d = ctx.d_dec
        if kind == "attention":
            return AdditiveAttention(scope, d, d, sec.get("d_att", d))
        if kind == "x_linear":
            return XLinearAttention(scope, d, d, d, sec.get("d_b", d), sec.get("d_m"))
        if kind == "top_down":
            return TopDownAttention(scope, d, d, d, sec.get("d_att", d))
        if kind == "co_attention":
            return CoAttention(scope, d, sec.get("heads", 2), sec.get("d_ff"), sec.get("tied", False))
        return MeshedMemoryAttention(scope, d, sec.get("heads", 2), sec.get("memory_slots", 4))
    return make


def _decoder_factory(kind):
    def make(scope, sec, ctx):
        V, d = ctx.vocab_size, ctx.d_dec
        layers = sec.get("layers", 1)
        if kind in RECURRENT_DECODERS:
            return RecurrentDecoder(scope, V, d, ctx.shared_interaction(scope.store.scope("interaction")),
                                    kind, layers)
        if ctx.cfg.stage_choices["interaction"] == "top_down":
            raise ConfigError(f"[interaction] top_down needs a recurrent decoder, [decoder] is {kind}")
        if kind == "conv":
            return ConvDecoder(scope, V, d, ctx.make_interaction, layers, sec.get("kernel", 3),
                               sec.get("max_pos", 64))
        return TransformerDecoder(scope, V, d, ctx.make_interaction, layers, sec.get("heads", 2),
                                  sec.get("d_ff"), sec.get("max_pos", 64))
    return make


def _greedy(scope, sec, ctx):
    return GreedyStrategy(sec.get("max_len", 16))


def _beam(scope, sec, ctx):
    return BeamStrategy(sec.get("beam", 3), sec.get("max_len", 16), float(sec.get("alpha", 0.0)))


def _vlp_heads(scope, sec, ctx):
    from .tasks import VLPHeads
    return VLPHeads(scope, ctx)


def default_registry() -> ModuleRegistry:
    reg = ModuleRegistry()
    reg.register("preprocessing", "regions", _visual_regions)
    for name in ("lstm", "gcn", "conv", "self_attention"):
        reg.register("encoder", name, _encoder_factory(name))
    for name in ("attention", "x_linear", "top_down", "co_attention", "meshed_memory"):
        reg.register("interaction", name, _interaction_factory(name))
    for name in ("lstm", "gru", "conv", "transformer"):
        reg.register("decoder", name, _decoder_factory(name))
    reg.register("decode", "greedy", _greedy)
    reg.register("decode", "beam", _beam)
    reg.register("training", "ce", lambda scope, sec, ctx: TR.CrossEntropyStrategy())
    reg.register("training", "label_smoothing",
                 lambda scope, sec, ctx: TR.LabelSmoothingStrategy(sec.get("epsilon", 0.1)))
    reg.register("training", "scheduled_sampling",
                 lambda scope, sec, ctx: TR.ScheduledSamplingStrategy(sec.get("ss_k", 0.05),
                                                                      sec.get("ss_pmin", 0.25)))
    reg.register("training", "scst",
                 lambda scope, sec, ctx: TR.SCSTStrategy(sec.get("reward", "cider"),
                                                         ctx.cfg.get("decode", "max_len", 16)))
    reg.register("pretraining", "none", lambda scope, sec, ctx: None)
    reg.register("pretraining", "vlp", _vlp_heads)
    return reg


# ------------------------------------------------------------------ helpers

def batch_rows(batch: Batch, rows) -> Batch:
    rows = list(rows)
    return Batch(batch.visual[rows], batch.region_mask[rows], [batch.edges[i] for i in rows],
                 batch.text[rows], batch.text_mask[rows], [batch.ids[i] for i in rows],
                 [batch.refs[i] for i in rows] if batch.refs else [],
                 None if batch.answers is None else batch.answers[rows])


def as_batch(inputs) -> Batch:
    if isinstance(inputs, Batch):
        return inputs
    if isinstance(inputs, (VisualTokens, Example)):
        inputs = [inputs]
    items = [Example(str(k), x) if isinstance(x, VisualTokens) else x for k, x in enumerate(inputs)]
    return collate(items)


def feature_dim(cfg: PipelineConfig) -> int:
    """Visual feature width implied by the config ([preprocessing] d_v, else shape-world)."""
    d_v = cfg.get("preprocessing", "d_v")
    if d_v is not None:
        return int(d_v)
    return 6 + int(cfg.get("data", "noise_dims", 2))


def config_vocabulary(cfg: PipelineConfig) -> Vocabulary:
    path = cfg.get("data", "vocab")
    return Vocabulary.load(path) if path else shape_world_vocabulary()


# ------------------------------------------------------------------ pipeline

class Pipeline:
    """All stages of one configured model over a shared :class:`ParamStore`.

    Also a *step model* for the decode strategies: ``start``/``step``/
    ``select``/``batch_size``/``split``.
    """

    def __init__(self, cfg: PipelineConfig, registry: ModuleRegistry, seed: int, vocab: Vocabulary,
                 d_v: int):
        self.cfg, self.seed, self.vocab = cfg, int(seed), vocab
        self.task = cfg.task
        self.store = ParamStore(seed)
        enc_sec, dec_sec = cfg.section("encoder"), cfg.section("decoder")
        d_enc = int(enc_sec.get("hidden", DEFAULT_HIDDEN))
        d_dec = int(dec_sec.get("hidden", d_enc))
        self.adapter = None
        if d_enc != d_dec and not dec_sec.get("adapter", False):
            raise ConfigError(f"[encoder] hidden = {d_enc} does not match [decoder] hidden = {d_dec}; "
                              "set [decoder] adapter = true to insert a projection")
        ctx = BuildContext(cfg, registry, len(vocab), d_v, d_enc, d_dec)
        self.ctx = ctx
        choice = cfg.stage_choices
        S = self.store.scope

        def build(stage, scope_name):
            return registry.lookup(stage, choice[stage])(S(scope_name), cfg.section(stage), ctx)

        self.visual_embed = build("preprocessing", "visual_embed")
        self.encoder = build("encoder", "encoder")
        if d_enc != d_dec:
            self.adapter = Linear(S("adapter"), d_enc, d_dec)
        self.dropout = float(enc_sec.get("dropout", 0.0))
        self.multi_stream = self.task != "captioning" or choice["pretraining"] != "none"
        if self.multi_stream and choice["interaction"] == "top_down":
            raise ConfigError(f"[interaction] top_down has no sentence-stream form; task {self.task} "
                              "needs attention, x_linear, co_attention or meshed_memory")
        if choice["decoder"] in RECURRENT_DECODERS or self.multi_stream:
            self.interaction = ctx.shared_interaction(S("interaction"))
        else:
            self.interaction = None
        self.decoder = build("decoder", "decoder")
        tied = self.decoder.embed if dec_sec.get("tie_weights", False) else None
        if tied is not None and tied.shape[1] != d_dec:
            raise ConfigError("[decoder] tie_weights needs the word width to equal [decoder] hidden")
        self.head = LogitsHead(S("logits"), d_dec, len(vocab), tied)
        self.text_embed = self.text_encoder = None
        if self.multi_stream:
            kind = cfg.get("pipeline", "text_encoder", choice["encoder"])
            text_sec = cfg.sections.get("text_encoder", enc_sec)
            self.text_embed = TextEmbedding(S("text_embed"), len(vocab), d_dec,
                                            max_pos=text_sec.get("max_pos", 64))
            self.text_encoder = registry.lookup("encoder", kind)(S("text_encoder"), text_sec, ctx, d_dec)
        self.decode_strategy = build("decode", "decode")
        self.training_strategy = build("training", "training")
        self.pretraining = build("pretraining", "pretraining")
        if self.pretraining is None and self.task == "vlp":
            self.pretraining = _vlp_heads(S("pretraining"), cfg.section("pretraining"), ctx)
        from .tasks import build_task_head
        self.task_head = build_task_head(self.task, S(self.task), cfg, ctx)

    # -------------------------------------------------------------- params
    def parameters(self):
        return self.store.parameters()

    def named_parameters(self):
        return self.store.named_parameters()

    def signature(self) -> int:
        """63-bit digest of everything that fixes parameter shapes and meaning."""
        h = hashlib.sha256()
        h.update(str(self.cfg.hash()).encode())
        h.update(f"|d_v={self.ctx.d_v}|".encode())
        h.update("\n".join(self.vocab.id_to_token).encode())
        return int.from_bytes(h.digest()[:8], "little") & ((1 << 63) - 1)

    # ------------------------------------------------------------ encoding
    def encode_visual(self, batch: Batch, rng=None) -> EncoderOutput:
        x = self.visual_embed(batch.visual, batch.region_mask)
        x = T.dropout(x, self.dropout, rng)
        enc = self.encoder(x, batch.region_mask, batch.edges)
        if self.adapter is not None:
            enc = EncoderOutput.from_states(self.adapter(enc.states), enc.mask)
        return enc

    def encode_text(self, ids, mask, rng=None) -> EncoderOutput:
        if self.text_encoder is None:
            raise UsageError("this pipeline has no sentence encoder (captioning without pre-training)")
        mask = np.asarray(mask, dtype=bool)
        x = T.dropout(self.text_embed(ids, mask), self.dropout, rng)
        return self.text_encoder(x, mask)

    def logits_for(self, batch: Batch, input_ids, rng=None, enc=None):
        """Teacher-forced logits ``[B, T, V]`` for the given decoder inputs."""
        enc = enc if enc is not None else self.encode_visual(batch, rng)
        return self.head(self.decoder.forward(np.asarray(input_ids), enc))

    def caption_logits(self, batch: Batch, rng=None):
        return self.logits_for(batch, batch.text[:, :-1], rng)

    # ---------------------------------------------------------- step model
    def start(self, inputs):
        batch = as_batch(inputs)
        with T.no_grad():
            enc = self.encode_visual(batch)
            return {"dec": self.decoder.init_state(enc), "B": len(batch)}

    def step(self, state, tokens):
        with T.no_grad():
            h, dec = self.decoder.step(state["dec"], np.asarray(tokens, dtype=np.int64))
            logp = T.log_softmax(self.head(h)).data
        return logp, {"dec": dec, "B": state["B"]}

    def select(self, state, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return {"dec": select_rows(state["dec"], rows), "B": len(rows)}

    def batch_size(self, state) -> int:
        return state["B"]

    def split(self, inputs):
        batch = as_batch(inputs)
        return [batch_rows(batch, [i]) for i in range(len(batch))]

    # --------------------------------------------------------------- decode
    def decode(self, inputs, strategy=None) -> list[list[int]]:
        return (strategy or self.decode_strategy).decode_batch(self, as_batch(inputs))

    def captions(self, inputs, strategy=None) -> list[str]:
        return [detokenize(ids, self.vocab) for ids in self.decode(inputs, strategy)]


def build_pipeline(cfg: PipelineConfig, registry: ModuleRegistry | None = None, seed: int = 0,
                   vocab: Vocabulary | None = None, d_v: int | None = None) -> Pipeline:
    return Pipeline(cfg, registry or default_registry(), seed,
                    vocab if vocab is not None else config_vocabulary(cfg),
                    d_v if d_v is not None else feature_dim(cfg))


def load_examples(cfg: PipelineConfig, vocab: Vocabulary, split: str = "train") -> list[Example]:
    """Examples named by ``[data]``: built-in shape-world generation or a data directory."""
    from .data import (caption_examples, make_synthetic_dataset, make_vqa_dataset, read_data_dir,
                       tokenize)
    sec = cfg.section("data")
    max_len = int(sec.get("max_len", 16))
    source = sec.get("source", "shape_world")
    if source == "dir":
        key = "path" if split == "train" else "val_path"
        root = sec.get(key)
        if root is None:
            raise ConfigError(f"[data] source = dir needs '{key}'")
        return [Example(k, v, tokenize(refs[0], vocab, max_len), [r for r in refs])
                for k, v, refs in read_data_dir(root)]
    if source != "shape_world":
        raise ConfigError(f"[data] source must be shape_world or dir, got {source!r}")
    seed = int(sec.get("seed", 0)) + (0 if split == "train" else 1_000_003)
    n = int(sec.get("n_train" if split == "train" else "n_val", 32 if split == "train" else 64))
    kw = dict(n_regions=int(sec.get("n_regions", 3)), noise_dims=int(sec.get("noise_dims", 2)),
              sigma=float(sec.get("sigma", 0.1)))
    if cfg.task in ("vqa", "vcr"):
        return [Example(f"{split}{k}", v, tokenize(q, vocab, max_len), [], a)
                for k, (v, q, a) in enumerate(make_vqa_dataset(seed, n, **kw))]
    return caption_examples(make_synthetic_dataset(seed, n, **kw), vocab, max_len, split)
