"""Corpus ingestion, character vocabulary and fixed-length batch assembly."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MASK_SYMBOL = "█"  # solid block; never a legitimate corpus character


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Ordered character alphabet; MASK (when present) is always the last id."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise DataError("vocab symbols must be unique")

    @property
    def n(self) -> int:
        return len(self.symbols)

    @property
    def mask_id(self) -> int | None:
        if self.symbols and self.symbols[-1] == MASK_SYMBOL:
            return self.n - 1
        return None

    def _lookup(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.symbols)}

    def encode(self, text: str) -> np.ndarray:
        table = self._lookup()
        ids = np.empty(len(text), dtype=np.int64)
        for pos, ch in enumerate(text):
            idx = table.get(ch)
            if idx is None:
                raise DataError(f"unknown character {ch!r} at position {pos}")
            ids[pos] = idx
        return ids

    def decode(self, ids) -> str:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n):
            raise DataError(f"token id out of range for vocab of size {self.n}")
        return "".join(self.symbols[i] for i in ids)

    def to_json(self) -> list[str]:
        return list(self.symbols)

    @classmethod
    def from_json(cls, symbols: list[str]) -> "Vocab":
        return cls(tuple(symbols))


@dataclass
class Corpus:
    """Raw documents with deterministic train/valid/test split tags."""

    documents: list[str]
    splits: dict[str, list[int]]

    @classmethod
    def from_documents(cls, documents: list[str], seed: int = 0) -> "Corpus":
        docs = [d for d in documents if d]
        if not docs:
            raise DataError("empty corpus")
        order = np.random.default_rng(seed).permutation(len(docs))
        n_valid = max(len(docs) // 20, 1) if len(docs) >= 3 else 0
        n_test = n_valid
        n_train = len(docs) - n_valid - n_test
        splits = {
            "train": sorted(int(i) for i in order[:n_train]),
            "valid": sorted(int(i) for i in order[n_train:n_train + n_valid]),
            "test": sorted(int(i) for i in order[n_train + n_valid:]),
        }
        return cls(documents=docs, splits=splits)

    @classmethod
    def from_directory(cls, path: str | Path, seed: int = 0) -> "Corpus":
        files = sorted(Path(path).glob("*.txt"))
        if not files:
            raise DataError(f"empty corpus: no .txt files under {path}")
        return cls.from_documents([f.read_text(encoding="utf-8") for f in files], seed=seed)

    def text(self, split: str = "train") -> str:
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}")
        return "\n".join(self.documents[i] for i in self.splits[split])

    def all_text(self) -> str:
        return "\n".join(self.documents)


def build_vocab(corpus: Corpus, kernel_kind: str) -> Vocab:
    """Distinct characters sorted by code point; absorbing kernels get MASK appended."""
    text = corpus.all_text()
    if not text:
        raise DataError("empty corpus")
    if MASK_SYMBOL in text:
        raise DataError(f"corpus contains the reserved MASK glyph {MASK_SYMBOL!r}")
    symbols = tuple(sorted(set(text)))
    if kernel_kind == "absorb":
        symbols = symbols + (MASK_SYMBOL,)
    elif kernel_kind != "uniform":
        raise DataError(f"unknown kernel kind: {kernel_kind!r}")
    return Vocab(symbols)


def split_windows(corpus: Corpus, vocab: Vocab, length: int, split: str = "train") -> np.ndarray:
    """Non-overlapping length-L windows over the concatenated split, in text order."""
    ids = vocab.encode(corpus.text(split))
    n_windows = len(ids) // length
    if n_windows == 0:
        raise DataError(
            f"split {split!r} has {len(ids)} tokens, shorter than window length {length}")
    return ids[: n_windows * length].reshape(n_windows, length)


def make_batches(corpus: Corpus, length: int, batch_size: int, seed: int,
                 vocab: Vocab | None = None, split: str = "train") -> list[np.ndarray]:
    """One epoch of [batch_size, length] token batches, shuffled by seed.

    Windows are the non-overlapping grid over the concatenated split; the
    trailing remainder (tokens and any short final batch) is dropped.
    """
    if vocab is None:
        vocab = build_vocab(corpus, "uniform")
    windows = split_windows(corpus, vocab, length, split=split)
    order = np.random.default_rng(seed).permutation(len(windows))
    shuffled = windows[order]
    n_full = len(shuffled) // batch_size
    return [shuffled[i * batch_size:(i + 1) * batch_size] for i in range(n_full)]


def batch_stream(corpus: Corpus, vocab: Vocab, length: int, batch_size: int,
                 seed: int, split: str = "train") -> Iterator[np.ndarray]:
    """Endless deterministic batch stream; reshuffles windows each epoch."""
    windows = split_windows(corpus, vocab, length, split=split)
    epoch = 0
    while True:
        order = np.random.default_rng(seed + epoch).permutation(len(windows))
        for start in range(0, len(windows) - batch_size + 1, batch_size):
            yield windows[order[start:start + batch_size]]
        if len(windows) < batch_size:  # tiny corpora: repeat windows to fill a batch
            reps = int(np.ceil(batch_size / len(windows)))
            tiled = np.tile(windows[order], (reps, 1))
            yield tiled[:batch_size]
        epoch += 1


_WORD_BANK = {
    "noun": ["river", "stone", "garden", "window", "letter", "carriage", "meadow",
             "lantern", "harbor", "valley", "orchard", "sparrow", "bridge", "cottage"],
    "verb": ["crossed", "watched", "carried", "followed", "remembered", "painted",
             "gathered", "opened", "promised", "repaired"],
    "adj": ["quiet", "bright", "narrow", "ancient", "gentle", "distant", "pale",
            "crooked", "warm", "silver"],
}


def synthetic_corpus(n_docs: int = 40, sentences_per_doc: int = 30, seed: int = 0) -> Corpus:
    """Deterministic English-like character corpus for desk-scale experiments."""
    rng = np.random.default_rng(seed)

    def pick(kind):
        words = _WORD_BANK[kind]
        return words[rng.integers(0, len(words))]

    docs = []
    for _ in range(n_docs):
        sentences = []
        for _ in range(sentences_per_doc):
            form = rng.integers(0, 3)
            if form == 0:
                s = f"the {pick('adj')} {pick('noun')} {pick('verb')} the {pick('noun')}."
            elif form == 1:
                s = f"a {pick('noun')} near the {pick('adj')} {pick('noun')} {pick('verb')} slowly."
            else:
                s = f"she {pick('verb')} the {pick('noun')} by the {pick('adj')} {pick('noun')}."
            sentences.append(s)
        docs.append(" ".join(sentences))
    return Corpus.from_documents(docs, seed=seed)
