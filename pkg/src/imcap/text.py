"""Tokenization, vocabulary construction and caption encoding.

Special ids are fixed: PAD=0, SOS=1, EOS=2, UNK=3. Corpus tokens start at 4
and are ordered by descending count, then lexicographically.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<sos>", "<eos>", "<unk>")
NUM_SPECIAL = len(SPECIAL_TOKENS)

DEFAULT_MIN_COUNT = 5
DEFAULT_MAX_LEN = 30

_PUNCT = ".,!?;:\"'"
_PUNCT_RE = re.compile("([" + re.escape(_PUNCT) + "])")


class CorruptSequenceError(ValueError):
    """A token id sequence references ids outside the vocabulary."""


def tokenize(raw: str) -> list[str]:
    """Lowercase, detach punctuation and split on whitespace.

    >>> tokenize("A man, running.")
    ['a', 'man', ',', 'running', '.']
    """
    spaced = _PUNCT_RE.sub(r" \1 ", raw.lower())
    return [tok for tok in spaced.split() if tok]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]  # corpus tokens in id order, starting at id 4
    min_count: int = DEFAULT_MIN_COUNT
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mapping = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for i, tok in enumerate(self.tokens, start=NUM_SPECIAL):
            if tok in mapping:
                raise ValueError(f"duplicate or reserved token {tok!r}")
            mapping[tok] = i
        object.__setattr__(self, "token_to_id", mapping)

    @property
    def id_to_token(self) -> list[str]:
        return list(SPECIAL_TOKENS) + list(self.tokens)

    def __len__(self) -> int:
        return NUM_SPECIAL + len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def to_json(self) -> dict:
        return {"min_count": self.min_count, "tokens": list(self.tokens)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(tokens=tuple(obj["tokens"]), min_count=int(obj["min_count"]))

    def save(self, path: str | Path) -> None:
        text = json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True, indent=1)
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(captions: Iterable[Sequence[str]], min_count: int = DEFAULT_MIN_COUNT) -> Vocabulary:
    """Build a vocabulary from tokenized training captions."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for toks in captions:
        counts.update(toks)
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    kept = [(tok, n) for tok, n in counts.items() if n >= min_count]
    kept.sort(key=lambda item: (-item[1], item[0]))
    return Vocabulary(tokens=tuple(tok for tok, _ in kept), min_count=min_count)


def encode(tokens: Sequence[str], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    """SOS + ids + EOS, truncated to ``max_len`` while keeping the final EOS."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    body = [vocab.token_to_id.get(tok, UNK_ID) for tok in tokens][: max_len - 2]
    return [SOS_ID, *body, EOS_ID]


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Strip special ids and join the remaining tokens with single spaces."""
    size = len(vocab)
    words = []
    table = vocab.id_to_token
    for i in ids:
        i = int(i)
        if i < 0 or i >= size:
            raise CorruptSequenceError(f"token id {i} out of range for vocabulary of size {size}")
        if i >= NUM_SPECIAL:
            words.append(table[i])
    return " ".join(words)
