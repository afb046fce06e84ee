"""Caption metrics over multi-reference corpora: BLEU-4, METEOR (exact match) and CIDEr.

Inputs are token lists. ``candidates[i]`` is scored against the reference set
``references[i]`` (a non-empty list of token lists).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

Tokens = Sequence[str]
RefSet = Sequence[Tokens]

MAX_ORDER = 4
METEOR_EXACT_LIMIT = 12


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    if not 1 <= n <= MAX_ORDER:
        raise ValueError(f"n-gram order must be in 1..{MAX_ORDER}, got {n}")
    toks = tuple(tokens)
    return Counter(toks[i : i + n] for i in range(len(toks) - n + 1))


def _check_corpus(candidates, references):
    if len(candidates) == 0:
        raise ValueError("empty candidate corpus")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if len(refs) == 0:
            raise ValueError(f"reference set {i} is empty")


# ---------------------------------------------------------------------------
# BLEU


def _closest_ref_length(c: int, refs: RefSet) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def _bleu_stats(cand: Tokens, refs: RefSet) -> tuple[list[int], list[int], int, int]:
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        cand_counts = ngram_counts(cand, n)
        max_ref = Counter()
        for ref in refs:
            for gram, cnt in ngram_counts(ref, n).items():
                if cnt > max_ref[gram]:
                    max_ref[gram] = cnt
        matches.append(sum(min(cnt, max_ref[gram]) for gram, cnt in cand_counts.items()))
        totals.append(max(len(cand) - n + 1, 0))
    return matches, totals, len(cand), _closest_ref_length(len(cand), refs)


def _bleu_from_stats(matches, totals, c, r) -> float:
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / MAX_ORDER
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def bleu4_sentence(cand: Tokens, refs: RefSet) -> float:
    return _bleu_from_stats(*_bleu_stats(cand, refs))


def bleu4_corpus(candidates: Sequence[Tokens], references: Sequence[RefSet]) -> float:
    """Corpus BLEU-4 from pooled clipped n-gram counts, without smoothing."""
    _check_corpus(candidates, references)
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    c = r = 0
    for cand, refs in zip(candidates, references):
        m, t, cl, rl = _bleu_stats(cand, refs)
        for n in range(MAX_ORDER):
            matches[n] += m[n]
            totals[n] += t[n]
        c += cl
        r += rl
    return _bleu_from_stats(matches, totals, c, r)


# ---------------------------------------------------------------------------
# METEOR (exact unigram matching only)


def _count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    """Chunks in an alignment given as (cand_pos, ref_pos) pairs sorted by cand_pos."""
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def _align_exact(cand: tuple, ref: tuple) -> tuple[int, int]:
    """Maximum matches, then minimum chunks, by exhaustive memoized search."""
    positions = {}
    for j, tok in enumerate(ref):
        positions.setdefault(tok, []).append(j)
    n = len(cand)

    @lru_cache(maxsize=None)
    def best(i: int, used: int, prev: int) -> tuple[int, int]:
        # returns (-matches, chunks) for cand[i:], lexicographically minimal
        if i == n:
            return (0, 0)
        result = best(i + 1, used, -2)
        for j in positions.get(cand[i], ()):
            if used >> j & 1:
                continue
            neg_m, ch = best(i + 1, used | (1 << j), j)
            option = (neg_m - 1, ch + (0 if prev >= 0 and j == prev + 1 else 1))
            if option < result:
                result = option
        return result

    neg_m, chunks = best(0, 0, -2)
    return -neg_m, chunks


def _align_greedy(cand: tuple, ref: tuple) -> tuple[int, int]:
    positions = {}
    for j, tok in enumerate(ref):
        positions.setdefault(tok, []).append(j)
    used = set()
    pairs = []
    prev_j = None
    for i, tok in enumerate(cand):
        free = [j for j in positions.get(tok, ()) if j not in used]
        if not free:
            prev_j = None
            continue
        j = prev_j + 1 if prev_j is not None and prev_j + 1 in free else free[0]
        used.add(j)
        pairs.append((i, j))
        prev_j = j
    return len(pairs), _count_chunks(pairs)


def _match_count(cand: Tokens, ref: Tokens) -> int:
    cc, rc = Counter(cand), Counter(ref)
    return sum(min(cnt, rc[tok]) for tok, cnt in cc.items())


def meteor_pair(cand: Tokens, ref: Tokens) -> float:
    cand, ref = tuple(cand), tuple(ref)
    m = _match_count(cand, ref)
    if m == 0:
        return 0.0
    if m <= METEOR_EXACT_LIMIT:
        m_aligned, chunks = _align_exact(cand, ref)
    else:
        m_aligned, chunks = _align_greedy(cand, ref)
    assert m_aligned == m
    precision = m / len(cand)
    recall = m / len(ref)
    fmean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (chunks / m) ** 3
    return fmean * (1.0 - penalty)


def meteor_sentence(cand: Tokens, refs: RefSet) -> float:
    return max(meteor_pair(cand, ref) for ref in refs)


def meteor_corpus(candidates: Sequence[Tokens], references: Sequence[RefSet]) -> float:
    _check_corpus(candidates, references)
    scores = [meteor_sentence(c, refs) for c, refs in zip(candidates, references)]
    return math.fsum(scores) / len(scores)


# ---------------------------------------------------------------------------
# CIDEr


def _document_frequency(references: Sequence[RefSet]) -> list[Counter]:
    df = [Counter() for _ in range(MAX_ORDER)]
    for refs in references:
        for n in range(1, MAX_ORDER + 1):
            seen = set()
            for ref in refs:
                seen.update(ngram_counts(ref, n))
            df[n - 1].update(seen)
    return df


def _tfidf(tokens: Tokens, n: int, df: Counter, num_docs: int) -> dict:
    vec = {}
    for gram, cnt in ngram_counts(tokens, n).items():
        idf = max(math.log(num_docs / (1.0 + df[gram])), 0.0)
        if idf > 0.0:
            vec[gram] = cnt * idf
    return vec


def _cosine(u: dict, v: dict) -> float:
    if not u or not v:
        return 0.0
    dot = sum(w * v[g] for g, w in u.items() if g in v)
    nu = math.sqrt(sum(w * w for w in u.values()))
    nv = math.sqrt(sum(w * w for w in v.values()))
    return dot / (nu * nv)


def _cider_scores(candidates, references) -> list[float]:
    df = _document_frequency(references)
    num_docs = len(references)
    scores = []
    for cand, refs in zip(candidates, references):
        total = 0.0
        for n in range(1, MAX_ORDER + 1):
            g_c = _tfidf(cand, n, df[n - 1], num_docs)
            sims = [_cosine(g_c, _tfidf(ref, n, df[n - 1], num_docs)) for ref in refs]
            total += math.fsum(sims) / len(refs)
        scores.append(10.0 * total / MAX_ORDER)
    return scores


def cider_corpus(candidates: Sequence[Tokens], references: Sequence[RefSet]) -> float:
    """Plain CIDEr (x10) with IDF taken from this corpus's reference sets."""
    _check_corpus(candidates, references)
    scores = _cider_scores(candidates, references)
    return math.fsum(scores) / len(scores)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ImageScore:
    image_id: str
    candidate: str
    references: list[str]
    bleu4: float
    meteor: float
    cider: float


@dataclass
class MetricReport:
    bleu4: float
    meteor: float
    cider: float
    per_image: list[ImageScore] = field(default_factory=list)
    meteor_variant: str = "meteor-exact"

    def to_json(self) -> dict:
        return {
            "bleu4": self.bleu4,
            "meteor": self.meteor,
            "meteor_variant": self.meteor_variant,
            "cider": self.cider,
            "num_images": len(self.per_image),
            "per_image": [vars(s).copy() for s in self.per_image],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls(
            bleu4=obj["bleu4"],
            meteor=obj["meteor"],
            cider=obj["cider"],
            per_image=[ImageScore(**s) for s in obj["per_image"]],
            meteor_variant=obj.get("meteor_variant", "meteor-exact"),
        )


def evaluate_corpus(
    candidates: Sequence[Tokens],
    references: Sequence[RefSet],
    image_ids: Sequence[str] | None = None,
) -> MetricReport:
    _check_corpus(candidates, references)
    if image_ids is None:
        image_ids = [str(i) for i in range(len(candidates))]
    cider_each = _cider_scores(candidates, references)
    meteor_each = [meteor_sentence(c, refs) for c, refs in zip(candidates, references)]
    per_image = [
        ImageScore(
            image_id=str(img),
            candidate=" ".join(cand),
            references=[" ".join(r) for r in refs],
            bleu4=bleu4_sentence(cand, refs),
            meteor=met,
            cider=cid,
        )
        for img, cand, refs, met, cid in zip(image_ids, candidates, references, meteor_each, cider_each)
    ]
    return MetricReport(
        bleu4=bleu4_corpus(candidates, references),
        meteor=math.fsum(meteor_each) / len(meteor_each),
        cider=math.fsum(cider_each) / len(cider_each),
        per_image=per_image,
    )
