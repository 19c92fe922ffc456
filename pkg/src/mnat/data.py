"""Vocabulary, corpus I/O, synthetic tasks and token-budget batching."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, MASK, LENGTH, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<mask>", "<length>", "<unk>")
NUM_RESERVED = len(RESERVED)


class DataError(ValueError):
    """Malformed corpus, vocabulary or batching request."""


class Vocabulary:
    """Shared source/target token map; ids 0-3 are reserved."""

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(RESERVED) + list(tokens)
        self.stoi: dict[str, int] = {}
        for i, tok in enumerate(self.itos):
            if tok in self.stoi:
                raise DataError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = i

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def tokens(self) -> list[str]:
        return self.itos[NUM_RESERVED:]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids back to tokens, dropping PAD/MASK/LENGTH and keeping UNK."""
        out = []
        for i in ids:
            i = int(i)
            if i in (PAD, MASK, LENGTH):
                continue
            out.append(self.itos[i])
        return out

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line])


def build_vocab(paths: Sequence[str | Path]) -> Vocabulary:
    """Shared vocabulary over both sides of every corpus file.

    Order: descending frequency, ties broken lexicographically.
    """
    counts: Counter[str] = Counter()
    for path in paths:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read corpus {path}: {exc}") from exc
        for line in text.split("\n"):
            counts.update(line.replace("\t", " ").split())
    if not counts:
        raise DataError("empty corpus: no tokens found")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([tok for tok, _ in ordered if tok not in RESERVED])


@dataclass(frozen=True)
class SentencePair:
    source: tuple[int, ...]
    target: tuple[int, ...]

    def __post_init__(self):
        if not self.source or not self.target:
            raise DataError("sentence pair sides must be non-empty")
        for side in (self.source, self.target):
            if any(i in (PAD, MASK, LENGTH) for i in side):
                raise DataError("sentence pair contains a reserved id")


@dataclass
class Batch:
    source: np.ndarray  # (B, S) padded with PAD
    target: np.ndarray  # (B, T) padded with PAD
    source_lengths: np.ndarray
    target_lengths: np.ndarray

    def __len__(self) -> int:
        return self.source.shape[0]


def pad_sequences(seqs: Sequence[Sequence[int]], width: int | None = None) -> np.ndarray:
    width = width or max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(pairs: Sequence[SentencePair]) -> Batch:
    return Batch(
        source=pad_sequences([p.source for p in pairs]),
        target=pad_sequences([p.target for p in pairs]),
        source_lengths=np.array([len(p.source) for p in pairs], dtype=np.int64),
        target_lengths=np.array([len(p.target) for p in pairs], dtype=np.int64),
    )


# ------------------------------------------------------------------ corpus I/O


def read_lines(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_parallel_corpus(
    path: str | Path, vocab: Vocabulary, max_positions: int | None = None
) -> list[SentencePair]:
    """Read ``source<TAB>target`` lines in file order.

    Sentences longer than ``max_positions`` are skipped with a warning; the
    skip count is logged.
    """
    pairs = []
    skipped = 0
    for lineno, line in enumerate(read_lines(path), start=1):
        if "\t" not in line:
            raise DataError(f"{path}:{lineno}: missing TAB separator")
        src, tgt = line.split("\t", 1)
        src_toks, tgt_toks = src.split(), tgt.split()
        if not src_toks or not tgt_toks:
            raise DataError(f"{path}:{lineno}: empty source or target side")
        # encoder input also carries the [LENGTH] slot
        if max_positions is not None and (len(src_toks) + 1 > max_positions or len(tgt_toks) > max_positions):
            skipped += 1
            log.warning("%s:%d: sentence exceeds max_positions=%d, skipped", path, lineno, max_positions)
            continue
        pairs.append(SentencePair(tuple(vocab.encode(src_toks)), tuple(vocab.encode(tgt_toks))))
    if skipped:
        log.warning("%s: skipped %d oversize pairs", path, skipped)
    return pairs


def save_parallel_corpus(path: str | Path, pairs: Iterable[SentencePair], vocab: Vocabulary) -> None:
    lines = [f"{vocab.detokenize(p.source)}\t{vocab.detokenize(p.target)}\n" for p in pairs]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_source_file(path: str | Path, vocab: Vocabulary) -> list[list[int]]:
    """One source sentence per line; a TAB-separated target column is ignored."""
    out = []
    for lineno, line in enumerate(read_lines(path), start=1):
        toks = line.split("\t", 1)[0].split()
        if not toks:
            raise DataError(f"{path}:{lineno}: empty source line")
        out.append(vocab.encode(toks))
    return out


# ------------------------------------------------------------------ synthetic tasks

SYNTHETIC_KINDS = ("copy", "reverse", "lexicon", "multimodal_lexicon")


def synthetic_vocab(vocab_size: int) -> Vocabulary:
    """Vocabulary whose token ``w{i}`` has id ``i + 4``."""
    return Vocabulary([f"w{i}" for i in range(vocab_size)])


def lexicon_tables(vocab_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two bijections over content ids that disagree on every token."""
    rng = np.random.default_rng([seed, 7])
    first = rng.permutation(vocab_size)
    shift = 1 + int(rng.integers(vocab_size - 1)) if vocab_size > 1 else 0
    second = np.roll(first, shift)
    return first + NUM_RESERVED, second + NUM_RESERVED


def generate_synthetic_task(
    kind: str,
    vocab_size: int,
    count: int,
    max_len: int,
    seed: int,
    min_len: int = 1,
    table_seed: int | None = None,
) -> list[SentencePair]:
    """Sample ``count`` pairs over content ids ``4 .. 4 + vocab_size - 1``.

    ``lexicon`` maps each token through a fixed random bijection;
    ``multimodal_lexicon`` has two admissible translations per token and
    picks one bijection per sentence with probability 1/2 each.  The
    bijections depend on ``table_seed`` (default: ``seed``) so train and
    validation splits can share a lexicon while differing in sentences.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DataError(f"unknown synthetic task kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if vocab_size < 2 or max_len < min_len or min_len < 1:
        raise DataError("synthetic task needs vocab_size >= 2 and 1 <= min_len <= max_len")
    first, second = lexicon_tables(vocab_size, seed if table_seed is None else table_seed)
    rng = np.random.default_rng([seed, 11])
    pairs = []
    for _ in range(count):
        n = int(rng.integers(min_len, max_len + 1))
        src = rng.integers(0, vocab_size, size=n)
        if kind == "copy":
            tgt = src + NUM_RESERVED
        elif kind == "reverse":
            tgt = src[::-1] + NUM_RESERVED
        elif kind == "lexicon":
            tgt = first[src]
        else:
            tgt = (first if rng.random() < 0.5 else second)[src]
        pairs.append(SentencePair(tuple(int(i) + NUM_RESERVED for i in src), tuple(int(i) for i in tgt)))
    return pairs


# ------------------------------------------------------------------ batching


def batch_by_tokens(pairs: Sequence[SentencePair], token_budget: int, seed: int) -> list[Batch]:
    """Length-sorted greedy packing; batch order shuffled by ``seed``.

    A batch's non-pad target tokens never exceed ``token_budget``.
    """
    if not pairs:
        return []
    longest = max(len(p.target) for p in pairs)
    if longest > token_budget:
        raise DataError(f"a target of length {longest} exceeds token budget {token_budget}")
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i].target), len(pairs[i].source), i))
    groups: list[list[SentencePair]] = []
    current: list[SentencePair] = []
    used = 0
    for i in order:
        n = len(pairs[i].target)
        if current and used + n > token_budget:
            groups.append(current)
            current, used = [], 0
        current.append(pairs[i])
        used += n
    if current:
        groups.append(current)
    perm = np.random.default_rng(seed).permutation(len(groups))
    return [make_batch(groups[j]) for j in perm]
