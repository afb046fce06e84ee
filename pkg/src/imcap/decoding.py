"""Greedy and beam-search caption generation.

Works with anything exposing ``next_token_logits(prefix, enc) -> [V]``.
Scores are log-softmax values in float64. PAD and SOS are never generated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .text import EOS_ID, PAD_ID, SOS_ID


class NextTokenModel(Protocol):
    def next_token_logits(self, prefix: Sequence[int], enc) -> np.ndarray: ...


def next_token_logprobs(model: NextTokenModel, prefix: Sequence[int], enc) -> np.ndarray:
    logits = np.asarray(model.next_token_logits(list(prefix), enc), dtype=np.float64)
    z = logits - logits.max()
    logp = z - np.log(np.exp(z).sum())
    logp[PAD_ID] = -np.inf
    logp[SOS_ID] = -np.inf
    return logp


@dataclass
class Hypothesis:
    ids: list[int]
    logprob_sum: float = 0.0

    @property
    def length(self) -> int:
        """Generated tokens, excluding SOS."""
        return len(self.ids) - 1

    def finished(self, max_len: int) -> bool:
        return self.ids[-1] == EOS_ID or len(self.ids) >= max_len

    @property
    def normalized_score(self) -> float:
        return self.logprob_sum / max(self.length, 1)


@dataclass
class BeamStep:
    """One pruning step: every expansion considered and the ones kept."""
    expansions: list[Hypothesis]
    kept: list[Hypothesis]
    live_width: int
    retired: list[Hypothesis] = field(default_factory=list)


def greedy_decode(model: NextTokenModel, enc, max_len: int = 30) -> list[int]:
    """Iterated argmax from SOS until EOS or ``max_len`` ids; ties go to the lowest id."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    ids = [SOS_ID]
    while len(ids) < max_len:
        tok = int(np.argmax(next_token_logprobs(model, ids, enc)))
        ids.append(tok)
        if tok == EOS_ID:
            break
    return ids


def _rank_key(h: Hypothesis):
    return (-h.logprob_sum, h.ids)


def beam_search_decode(model: NextTokenModel, enc, max_len: int = 30, beam_width: int = 3,
                       trace: list | None = None) -> list[int]:
    """Beam search keeping the ``beam_width`` best prefixes by summed log-probability.

    Finished hypotheses leave the beam and shrink its width. The answer is the
    finished or still-live hypothesis with the highest mean log-probability per
    generated token (ties: lexicographically smallest ids). Pass a list as
    ``trace`` to collect a :class:`BeamStep` per expansion round.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    live = [Hypothesis([SOS_ID], 0.0)]
    retired: list[Hypothesis] = []
    while live:
        width = beam_width - len(retired)
        expansions = []
        for hyp in live:
            logp = next_token_logprobs(model, hyp.ids, enc)
            for tok in np.flatnonzero(np.isfinite(logp)):
                expansions.append(Hypothesis(hyp.ids + [int(tok)], hyp.logprob_sum + float(logp[tok])))
        expansions.sort(key=_rank_key)
        kept = expansions[:width]
        live = []
        newly_retired = []
        for hyp in kept:
            if hyp.finished(max_len):
                newly_retired.append(hyp)
            else:
                live.append(hyp)
        retired.extend(newly_retired)
        if trace is not None:
            trace.append(BeamStep(expansions, kept, width, newly_retired))
    pool = retired + live
    best = min(pool, key=lambda h: (-h.normalized_score, h.ids))
    return best.ids


def score_sequence(model: NextTokenModel, enc, ids: Sequence[int]) -> float:
    """Sum of log-probabilities of ``ids[1:]`` under teacher forcing."""
    ids = list(ids)
    if not ids or ids[0] != SOS_ID:
        raise ValueError("sequence must start with SOS")
    total = 0.0
    for t in range(1, len(ids)):
        total += float(next_token_logprobs(model, ids[:t], enc)[ids[t]])
    return total
