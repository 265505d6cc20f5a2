"""Pre-processing: vocabularies, tokenization, visual features, batching, shape-world."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import xtns
from .errors import FormatError, ShapeError, TokenIndexError, UsageError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

COLORS = ("red", "blue", "green")
SHAPES = ("circle", "square", "triangle")

_WORD = re.compile(r"[^\W_]+")


def split_words(sentence: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD.findall(sentence.lower())


def normalize(sentence: str) -> str:
    return " ".join(split_words(sentence))


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != RESERVED:
            raise FormatError("vocabulary must start with <pad>, <bos>, <eos>, <unk>")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise FormatError("vocabulary has duplicate tokens")

    def __len__(self):
        return len(self.id_to_token)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.id_to_token), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocabulary(corpus, min_freq: int = 1) -> Vocabulary:
    """Frequency-descending vocabulary, ties broken lexicographically."""
    if min_freq < 1:
        raise UsageError("min_freq must be >= 1")
    corpus = list(corpus)
    if not corpus:
        raise UsageError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for s in corpus for w in split_words(s))
    for r in RESERVED:
        counts.pop(r, None)
    kept = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + kept)


@dataclass
class TokenSequence:
    ids: list[int]
    mask: list[bool]
    text: str = ""

    def __len__(self):
        return len(self.ids)


def tokenize(sentence: str, vocab: Vocabulary, max_len: int = 16) -> TokenSequence:
    if max_len < 3:
        raise UsageError("max_len must be >= 3")
    words = split_words(sentence)[: max_len - 2]
    ids = [BOS] + [vocab.id(w) for w in words] + [EOS]
    return TokenSequence(ids, [True] * len(ids), sentence)


def detokenize(ids, vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= len(vocab):
            raise TokenIndexError(f"token id {i} out of range for vocabulary of {len(vocab)}")
        if i == EOS:
            break
        if i in (BOS, PAD):
            continue
        words.append(vocab.id_to_token[i])
    return " ".join(words)


@dataclass
class VisualTokens:
    features: np.ndarray                 # [N, d_v]
    edges: np.ndarray | None = None      # [E, 3] rows of (i, j, relation)
    global_: np.ndarray | None = None    # [d_v]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be [N, d], got {self.features.shape}")
        if self.features.shape[0] == 0:
            raise FormatError("features tensor has no rows")
        if not np.isfinite(self.features).all():
            raise FormatError("features contain non-finite values")
        if self.edges is not None:
            self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
            if self.edges.size and (self.edges[:, :2].max() >= self.n or self.edges[:, :2].min() < 0):
                raise ShapeError("edge endpoint outside the region set")
        if self.global_ is None:
            self.global_ = self.features.mean(axis=0)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def save_visual_features(path, visual: VisualTokens) -> None:
    entries = {"features": visual.features}
    if visual.edges is not None:
        entries["edges"] = visual.edges
    xtns.save(path, entries)


def load_visual_features(path) -> VisualTokens:
    entries = xtns.load(path)
    if "features" not in entries:
        raise FormatError(f"{path}: missing 'features' entry")
    feats = entries["features"].astype(np.float64)
    if feats.ndim != 2:
        raise FormatError(f"{path}: 'features' must be rank 2, got rank {feats.ndim}")
    return VisualTokens(feats, entries.get("edges"))


# ------------------------------------------------------------- shape-world

def shape_world_corpus() -> list[str]:
    """Every sentence the synthetic tasks can produce (captions and questions)."""
    caps = [f"a {c1} {s1} and a {c2} {s2}"
            for c1 in COLORS for s1 in SHAPES for c2 in COLORS for s2 in SHAPES]
    return caps + [f"what color is the {s}" for s in SHAPES]


def shape_world_vocabulary() -> Vocabulary:
    return build_vocabulary(shape_world_corpus(), 1)


def _region_edges(colors, shapes) -> np.ndarray:
    # relation 0: same color, 1: same shape, 2: neither
    rows = []
    n = len(colors)
    for i in range(n):
        for j in range(n):
            if i != j:
                rel = 0 if colors[i] == colors[j] else 1 if shapes[i] == shapes[j] else 2
                rows.append((i, j, rel))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def _region_features(rng, colors, shapes, noise_dims, sigma):
    n = len(colors)
    feats = np.zeros((n, 6 + noise_dims))
    feats[np.arange(n), colors] = 1.0
    feats[np.arange(n), 3 + np.asarray(shapes)] = 1.0
    if noise_dims:
        feats[:, 6:] = rng.normal(0.0, sigma, size=(n, noise_dims)) if sigma > 0 else 0.0
    return feats


def make_synthetic_dataset(seed: int, n: int, n_regions: int = 3, noise_dims: int = 2,
                           sigma: float = 0.1) -> list[tuple[VisualTokens, str]]:
    """Colored-shape images whose caption names the first two regions."""
    if n < 1 or n_regions < 2:
        raise UsageError("need n >= 1 and n_regions >= 2")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        colors = rng.integers(0, 3, size=n_regions)
        shapes = rng.integers(0, 3, size=n_regions)
        feats = _region_features(rng, colors, shapes, noise_dims, sigma)
        cap = (f"a {COLORS[colors[0]]} {SHAPES[shapes[0]]} "
               f"and a {COLORS[colors[1]]} {SHAPES[shapes[1]]}")
        out.append((VisualTokens(feats, _region_edges(colors, shapes)), cap))
    return out


def make_vqa_dataset(seed: int, n: int, n_regions: int = 3, noise_dims: int = 2,
                     sigma: float = 0.1) -> list[tuple[VisualTokens, str, int]]:
    """Shape-world images with "what color is the <shape>"; answer is a color index."""
    if not 1 <= n_regions <= len(SHAPES):
        raise UsageError("vqa images need 1..3 regions so every shape is unique")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        colors = rng.integers(0, 3, size=n_regions)
        shapes = rng.permutation(3)[:n_regions]
        feats = _region_features(rng, colors, shapes, noise_dims, sigma)
        k = int(rng.integers(0, n_regions))
        q = f"what color is the {SHAPES[shapes[k]]}"
        out.append((VisualTokens(feats, _region_edges(colors, shapes)), q, int(colors[k])))
    return out


# ------------------------------------------------------------------ batching

@dataclass
class Example:
    id: str
    visual: VisualTokens
    text: TokenSequence | None = None
    refs: list[str] = field(default_factory=list)
    answer: int | None = None


@dataclass
class Batch:
    visual: np.ndarray          # [B, N, d_v]
    region_mask: np.ndarray     # [B, N] bool
    edges: list                 # per example [E, 3] or None
    text: np.ndarray            # [B, T] int
    text_mask: np.ndarray       # [B, T] bool
    ids: list[str]
    refs: list[list[str]] = field(default_factory=list)
    answers: np.ndarray | None = None

    def __len__(self):
        return self.visual.shape[0]

    @property
    def global_(self) -> np.ndarray:
        m = self.region_mask[..., None]
        return (self.visual * m).sum(1) / m.sum(1)


def collate(examples, pad_id: int = PAD) -> Batch:
    """Stack examples, padding text and regions to the batch maximum."""
    if not examples:
        raise UsageError("cannot collate an empty list")
    exs = []
    for k, e in enumerate(examples):
        if isinstance(e, Example):
            exs.append(e)
        else:
            visual, text = e[0], e[1]
            exs.append(Example(str(k), visual, text))
    dims = {e.visual.dim for e in exs}
    if len(dims) != 1:
        raise ShapeError(f"inconsistent feature dims across examples: {sorted(dims)}")
    (d,) = dims
    B = len(exs)
    N = max(e.visual.n for e in exs)
    T = max((len(e.text) for e in exs if e.text is not None), default=0)
    visual = np.zeros((B, N, d))
    rmask = np.zeros((B, N), dtype=bool)
    text = np.full((B, T), pad_id, dtype=np.int64)
    tmask = np.zeros((B, T), dtype=bool)
    for b, e in enumerate(exs):
        visual[b, :e.visual.n] = e.visual.features
        rmask[b, :e.visual.n] = True
        if e.text is not None:
            L = len(e.text)
            text[b, :L] = e.text.ids
            tmask[b, :L] = e.text.mask
    answers = None
    if all(e.answer is not None for e in exs):
        answers = np.array([e.answer for e in exs], dtype=np.int64)
    return Batch(visual, rmask, [e.visual.edges for e in exs], text, tmask,
                 [e.id for e in exs], [list(e.refs) for e in exs], answers)


def caption_examples(pairs, vocab: Vocabulary, max_len: int = 16, prefix: str = "") -> list[Example]:
    """Wrap (VisualTokens, caption) pairs as tokenized examples."""
    return [Example(f"{prefix}{k}", v, tokenize(c, vocab, max_len), [normalize(c)])
            for k, (v, c) in enumerate(pairs)]


# ------------------------------------------------------------ data directory

def read_captions(path) -> list[tuple[str, str]]:
    """Lines of ``id<TAB>caption``."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise FormatError(f"{path}:{lineno}: expected id<TAB>caption")
            key, cap = line.split("\t", 1)
            rows.append((key, cap))
    return rows


def write_captions(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, cap in rows:
            fh.write(f"{key}\t{cap}\n")


def write_data_dir(root, pairs, prefix: str = "") -> None:
    """Lay out ``captions.txt`` plus ``features/<id>.xtns``."""
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    rows = []
    for k, (visual, cap) in enumerate(pairs):
        key = f"{prefix}{k:05d}"
        save_visual_features(root / "features" / f"{key}.xtns", visual)
        rows.append((key, cap))
    write_captions(root / "captions.txt", rows)


def read_data_dir(root) -> list[tuple[str, VisualTokens, list[str]]]:
    root = Path(root)
    cap_path = root / "captions.txt"
    if not cap_path.is_file():
        raise FileNotFoundError(str(cap_path))
    refs: dict[str, list[str]] = {}
    for key, cap in read_captions(cap_path):
        refs.setdefault(key, []).append(cap)
    out = []
    for key in sorted(refs):
        out.append((key, load_visual_features(root / "features" / f"{key}.xtns"), refs[key]))
    return out


def batches(examples, batch_size: int, seed: int, epoch: int):
    """Deterministic shuffle keyed by (seed, epoch), then fixed-size chunks."""
    order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield collate([examples[i] for i in order[start:start + batch_size]])


def ceil_count(rate: float, length: int) -> int:
    return int(math.ceil(rate * length - 1e-12)) if length else 0
