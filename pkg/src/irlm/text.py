"""Corpus ingestion: vocabulary, whitespace tokenization, padded batches."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
N_SPECIAL = len(SPECIAL_TOKENS)
DEFAULT_MAX_LEN = 128


class Tokenizer(Protocol):
    def tokenize(self, text: str) -> list[str]: ...


class WhitespaceTokenizer:
    """Lowercase, then split on whitespace."""

    def tokenize(self, text: str) -> list[str]:
        return text.lower().split()


class Vocab:
    """Bijective token <-> id map with the five specials pinned to ids 0-4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.itos):
            raise ValueError(f"token id {idx} outside vocabulary of size {len(self.itos)}")
        return self.itos[idx]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: vocabulary file must start with {', '.join(SPECIAL_TOKENS)}")
        return cls(lines[N_SPECIAL:])


def read_corpus(path) -> list[str]:
    """Non-blank lines of a UTF-8 one-sentence-per-line file."""
    text = Path(path).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def build_vocab(corpus_path, min_frequency: int = 1, max_size: int = 8192, tokenizer: Tokenizer | None = None) -> Vocab:
    """Vocabulary of the ``max_size`` most frequent tokens seen ``min_frequency`` times.

    Ties on frequency break lexicographically. ``max_size`` counts regular
    tokens only; the specials are always added on top.
    """
    tokenizer = tokenizer or WhitespaceTokenizer()
    lines = read_corpus(corpus_path)
    if not lines:
        raise ValueError(f"corpus {corpus_path} is empty")
    counts = Counter(tok for line in lines for tok in tokenizer.tokenize(line))
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    ranked = sorted((t for t, c in counts.items() if c >= min_frequency), key=lambda t: (-counts[t], t))
    return Vocab(ranked[:max_size])


def encode(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN, tokenizer: Tokenizer | None = None) -> list[int]:
    if max_len < 2:
        raise ValueError("max_len must leave room for [CLS] and [SEP]")
    tokenizer = tokenizer or WhitespaceTokenizer()
    body = [vocab.id(t) for t in tokenizer.tokenize(text)][: max_len - 2]
    return [CLS, *body, SEP]


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    """Space-joined tokens; PAD, CLS and SEP are dropped, UNK/MASK render literally."""
    out = []
    for i in ids:
        tok = vocab.token(int(i))
        if int(i) in (PAD, CLS, SEP):
            continue
        out.append(tok)
    return " ".join(out)


@dataclass
class Batch:
    ids: np.ndarray  # (batch, length), PAD-filled
    attention_mask: np.ndarray  # 1 for real tokens, 0 for padding
    lengths: np.ndarray
    indices: Optional[np.ndarray] = None  # corpus index of each row, when known

    def __len__(self) -> int:
        return self.ids.shape[0]

    def sequences(self) -> list[list[int]]:
        return [self.ids[i, : self.lengths[i]].tolist() for i in range(len(self))]


def pad_batch(sequences: Sequence[Sequence[int]], indices=None) -> Batch:
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    width = int(lengths.max()) if len(sequences) else 0
    ids = np.full((len(sequences), width), PAD, dtype=np.int64)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
    mask = (np.arange(width)[None, :] < lengths[:, None]).astype(np.int64)
    return Batch(ids, mask, lengths, None if indices is None else np.asarray(indices, dtype=np.int64))


def make_batches(sequences: Sequence[Sequence[int]], batch_size: int, rng: np.random.Generator) -> list[Batch]:
    """Shuffle with ``rng``, chunk into ``batch_size`` groups (last one may be short), pad each."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not len(sequences):
        return []
    order = rng.permutation(len(sequences))
    return [
        pad_batch([sequences[j] for j in order[i : i + batch_size]], order[i : i + batch_size])
        for i in range(0, len(order), batch_size)
    ]
