"""Text ingestion: end-of-sentence marking, char/word tokenization, vocab.

Corpora are plain-text files following the ``<name>.train.txt`` /
``.valid.txt`` / ``.test.txt`` suffix convention. Every newline-terminated
line contributes an <EOS> token. Vocabularies reserve id 0 for <UNK> and
id 1 for <EOS>, are built from the training split only, and persist as
newline-delimited UTF-8 with the line index as the id.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

UNK_TOKEN = "<UNK>"
EOS_TOKEN = "<EOS>"
UNK_ID = 0
EOS_ID = 1
SPLITS = ("train", "valid", "test")


def preprocess(text: str | bytes, mode: str) -> list[str]:
    """Turn raw text into a token surface stream.

    word mode splits lines on whitespace; char mode yields Unicode scalar
    values. Either way each newline becomes an <EOS> marker. Bytes input
    is decoded as UTF-8; invalid bytes raise DataError with the offset.
    """
    if mode not in ("char", "word"):
        raise DataError(f"preprocess: unknown tokenizer mode {mode!r}")
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"preprocess: invalid UTF-8 at byte offset {exc.start}") from exc
    tokens: list[str] = []
    remainder = text
    while remainder:
        line, sep, remainder = remainder.partition("\n")
        if mode == "word":
            tokens.extend(line.split())
        else:
            tokens.extend(line)
        if sep:
            tokens.append(EOS_TOKEN)
    return tokens


@dataclass
class Vocab:
    """token <-> id bijection with dense ids and reserved <UNK>/<EOS>."""

    tokens: list[str]

    def __post_init__(self):
        if self.tokens[:2] != [UNK_TOKEN, EOS_TOKEN]:
            raise DataError("Vocab: ids 0 and 1 must be <UNK> and <EOS>")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("Vocab: duplicate token surface")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, stream: list[str]) -> np.ndarray:
        idx = self.index
        return np.fromiter((idx.get(tok, UNK_ID) for tok in stream), dtype=np.int64, count=len(stream))

    def decode(self, ids: np.ndarray) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def oov_rate(self, stream: list[str]) -> float:
        if not stream:
            return 0.0
        known = self.index
        miss = sum(1 for tok in stream if tok not in known)
        return miss / len(stream)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        raw = Path(path).read_text(encoding="utf-8")
        if raw.endswith("\n"):
            raw = raw[:-1]
        return cls(tokens=raw.split("\n"))


def build_vocab(stream: list[str], min_count: int = 1, max_size: int | None = None) -> Vocab:
    """Keep the most frequent tokens (ties broken lexicographically).

    ``max_size`` counts the two reserved ids; tokens below ``min_count`` or
    beyond the cap fall back to <UNK> at encode time.
    """
    if not stream:
        raise DataError("build_vocab: empty token stream")
    counts = Counter(tok for tok in stream if tok != EOS_TOKEN)
    ranked = sorted((tok for tok, c in counts.items() if c >= min_count),
                    key=lambda tok: (-counts[tok], tok))
    if max_size is not None:
        if max_size < 2:
            raise DataError(f"build_vocab: max_size must be >= 2, got {max_size}")
        ranked = ranked[:max_size - 2]
    return Vocab(tokens=[UNK_TOKEN, EOS_TOKEN] + ranked)


@dataclass
class TokenStream:
    """Encoded token ids plus the split they came from."""

    ids: np.ndarray
    split: str


def split_path(prefix: str | Path, split: str) -> Path:
    if split not in SPLITS:
        raise DataError(f"split must be one of {SPLITS}, got {split!r}")
    return Path(f"{prefix}.{split}.txt")


def read_split(prefix: str | Path, split: str, mode: str) -> list[str]:
    path = split_path(prefix, split)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    return preprocess(path.read_bytes(), mode)


def load_corpus(prefix: str | Path, mode: str, min_count: int = 1,
                max_size: int | None = None) -> tuple[Vocab, dict[str, TokenStream]]:
    """Build the vocab from the training split and encode all present splits."""
    surfaces = {"train": read_split(prefix, "train", mode)}
    vocab = build_vocab(surfaces["train"], min_count=min_count, max_size=max_size)
    for split in ("valid", "test"):
        if split_path(prefix, split).exists():
            surfaces[split] = read_split(prefix, split, mode)
    streams = {split: TokenStream(ids=vocab.encode(toks), split=split)
               for split, toks in surfaces.items()}
    return vocab, streams


def unigram_perplexity(train_ids: np.ndarray, eval_ids: np.ndarray, vocab_size: int) -> float:
    """Perplexity of the add-one-smoothed unigram model fit on the train split."""
    train_ids = np.asarray(train_ids).reshape(-1)
    eval_ids = np.asarray(eval_ids).reshape(-1)
    if train_ids.size == 0 or eval_ids.size == 0:
        raise DataError("unigram_perplexity: empty stream")
    counts = np.bincount(train_ids, minlength=vocab_size).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    return float(np.exp(-logp[eval_ids].mean()))
