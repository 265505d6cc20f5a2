"""Caption metrics: BLEU-4 (unsmoothed), ROUGE-L (beta=1.2) and CIDEr-D.

Inputs are token lists (strings or ids).  Use :func:`xmodal.data.split_words`
to tokenize raw sentences so rewards and evaluation agree.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import UsageError


def ngrams(tokens, n: int) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


@dataclass
class NGramStats:
    counts: Counter = field(default_factory=Counter)
    length: int = 0

    @classmethod
    def of(cls, tokens, max_n: int = 4) -> "NGramStats":
        counts = Counter()
        for n in range(1, max_n + 1):
            counts.update(ngrams(tokens, n))
        return cls(counts, len(tokens))


def bleu4(candidate, references) -> float:
    references = [list(r) for r in references]
    if not references:
        raise UsageError("bleu4 needs at least one reference")
    c = len(candidate)
    if c == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        cand = ngrams(candidate, n)
        total = max(c - n + 1, 0)
        if total == 0:
            return 0.0
        best = Counter()
        for ref in references:
            for g, k in ngrams(ref, n).items():
                best[g] = max(best[g], k)
        hits = sum(min(k, best[g]) for g, k in cand.items())
        if hits == 0:
            return 0.0
        log_p += math.log(hits / total)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = math.exp(min(0.0, 1.0 - r / c))
    return bp * math.exp(log_p / 4)


def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta: float = 1.2) -> float:
    if not references:
        raise UsageError("rouge_l needs at least one reference")
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        rec, prec = lcs / len(ref), lcs / len(candidate)
        f = (1 + beta ** 2) * rec * prec / (rec + beta ** 2 * prec)
        best = max(best, f)
    return best


class CiderD:
    """Document frequencies over a reference corpus, and CIDEr-D scoring against it.

    ``corpus`` holds one entry per image: the list of its reference token lists.
    """

    def __init__(self, corpus, n: int = 4, sigma: float = 6.0):
        self.n, self.sigma = n, sigma
        self.df: Counter = Counter()
        docs = 0
        for refs in corpus:
            docs += 1
            seen = set()
            for ref in refs:
                for k in range(1, n + 1):
                    seen.update(ngrams(ref, k))
            self.df.update(seen)
        if docs == 0:
            raise UsageError("CIDEr-D needs a nonempty reference corpus for document frequencies")
        self.log_docs = math.log(float(docs))

    def _vec(self, tokens):
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: tf * (self.log_docs - math.log(max(1.0, self.df[g])))
                 for g, tf in ngrams(tokens, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms, len(tokens)

    def _sim(self, hyp, ref):
        (vh, nh, lh), (vr, nr, lr) = hyp, ref
        penalty = math.exp(-((lh - lr) ** 2) / (2 * self.sigma ** 2))
        out = []
        for k in range(self.n):
            val = sum(min(x, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, x in vh[k].items())
            if nh[k] != 0 and nr[k] != 0:
                val /= nh[k] * nr[k]
            out.append(val * penalty)
        return out

    def score(self, candidate, references) -> float:
        references = list(references)
        if not references:
            raise UsageError("cider_d needs at least one reference")
        hyp = self._vec(candidate)
        total = [0.0] * self.n
        for ref in references:
            for k, s in enumerate(self._sim(hyp, self._vec(ref))):
                total[k] += s
        return 10.0 * sum(t / len(references) for t in total) / self.n

    __call__ = score


def cider_d(candidate, references, corpus_idf: CiderD) -> float:
    return corpus_idf.score(candidate, references)


def corpus_scores(candidates, references) -> dict[str, float]:
    """Mean BLEU4 / ROUGEL / CIDEr over aligned candidate and reference lists."""
    if len(candidates) != len(references) or not candidates:
        raise UsageError("need equally many candidates and reference sets (at least one)")
    cider = CiderD(references)
    n = len(candidates)
    return {
        "BLEU4": sum(bleu4(c, r) for c, r in zip(candidates, references)) / n,
        "ROUGEL": sum(rouge_l(c, r) for c, r in zip(candidates, references)) / n,
        "CIDEr": sum(cider.score(c, r) for c, r in zip(candidates, references)) / n,
    }
