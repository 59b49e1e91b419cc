"""Tokenization, vocabulary, and n-gram extraction shared by metrics and model."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

ROLE_DESCRIPTION = "description"
ROLE_AVOIDANCE = "avoidance"
ROLES = (ROLE_DESCRIPTION, ROLE_AVOIDANCE)

_NON_ALNUM = re.compile(r"[^a-z0-9]+")


def normalize(raw: str) -> list[str]:
    """Lowercase, map every non-[a-z0-9] char to space, collapse runs, split."""
    return _NON_ALNUM.sub(" ", raw.lower()).split()


@dataclass(frozen=True)
class Caption:
    raw: str
    tokens: tuple[str, ...]
    role: str

    @classmethod
    def make(cls, raw: str, role: str) -> "Caption":
        if role not in ROLES:
            raise ValueError(f"unknown caption role: {role!r}")
        return cls(raw=raw, tokens=tuple(normalize(raw)), role=role)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    min_count: int
    _index: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def to_json(self) -> str:
        return json.dumps(list(self.tokens), ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str, min_count: int = 1) -> "Vocab":
        toks = json.loads(text)
        if tuple(toks[:4]) != RESERVED:
            raise ValueError("vocab file does not start with the reserved symbols")
        return cls(tokens=tuple(toks), min_count=min_count)


def build_vocab(corpus: list[Caption], min_count: int = 1) -> Vocab:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for cap in corpus:
        counts.update(cap.tokens)
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(tokens=RESERVED + tuple(kept), min_count=min_count)


def encode(vocab: Vocab, tokens: list[str], max_len: int) -> tuple[list[int], list[int]]:
    """[BOS, t_1.., EOS, PAD..] truncated/padded to max_len, plus a non-PAD mask."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    body = [vocab.id_of(t) for t in tokens[: max_len - 2]]
    ids = [BOS] + body + [EOS]
    ids += [PAD] * (max_len - len(ids))
    mask = [1 if i != PAD else 0 for i in ids]
    return ids, mask


def decode_ids(vocab: Vocab, ids: list[int]) -> list[str]:
    """Strip PAD/BOS/EOS and map the remaining ids back to token strings."""
    return [vocab.token_of(i) for i in ids if i not in (PAD, BOS, EOS)]


def ngrams(tokens, max_n: int = 4) -> dict[int, Counter]:
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    toks = tuple(tokens)
    out = {}
    for n in range(1, max_n + 1):
        out[n] = Counter(toks[i : i + n] for i in range(len(toks) - n + 1))
    return out
