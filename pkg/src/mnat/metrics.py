"""Corpus BLEU-4, repetition rate and the masked-token similarity probe."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import PAD, SentencePair, make_batch
from .eecr import refine_predict, sample_mask, substitute
from .model import NATModel


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def as_dict(self) -> dict:
        d = {"bleu": self.bleu, "bp": self.brevity_penalty, "hyp_len": self.hyp_len, "ref_len": self.ref_len}
        for i, p in enumerate(self.precisions, start=1):
            d[f"p{i}"] = p
        return d


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_order: int = 4) -> BleuReport:
    """Corpus BLEU with clipped n-gram counts and no smoothing (any zero precision gives 0)."""
    if len(hypotheses) != len(references):
        raise ValueError(f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("bleu: empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def repetition_rate(hypotheses: Sequence[Sequence]) -> float:
    """Percentage of tokens identical to their immediate predecessor."""
    if not hypotheses:
        raise ValueError("repetition_rate: empty corpus")
    repeats = total = 0
    for hyp in hypotheses:
        hyp = list(hyp)
        total += len(hyp)
        repeats += sum(1 for a, b in zip(hyp, hyp[1:]) if a == b)
    return 100.0 * repeats / total if total else 0.0


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass
class SimilarityReport:
    bin_edges: list[float]
    counts: list[int]
    mean: float
    similarities: np.ndarray

    def as_dict(self) -> dict:
        return {"mean_similarity": self.mean, "tokens": int(sum(self.counts))}


def similarity_probe(model: NATModel, pairs: Sequence[SentencePair], beta: float, K: int,
                     rng: np.random.Generator, sample_size: int, bins: int = 10,
                     batch_size: int = 128) -> SimilarityReport:
    """Cosine similarity of masked-token distributions under mixed vs. ground-truth observations.

    For each sampled sentence one mask is drawn, one mixed input is built
    from a ``k ~ U{1..K}`` refinement and ``beta`` substitution, and both
    inputs are decoded in eval mode.
    """
    if not pairs:
        raise ValueError("similarity_probe: empty corpus")
    sample_size = min(sample_size, len(pairs))
    chosen = sorted(rng.choice(len(pairs), size=sample_size, replace=False))
    sims = []
    for start in range(0, sample_size, batch_size):
        batch = make_batch([pairs[i] for i in chosen[start:start + batch_size]])
        b, n = batch.target.shape
        y_hat, _ = refine_predict(model, batch.source, batch.target_lengths, K, rng)
        masked = np.full((b, n), PAD, dtype=np.int64)
        mixed = masked.copy()
        mask = np.zeros((b, n), dtype=bool)
        for i in range(b):
            ln = batch.target_lengths[i]
            mt = sample_mask(batch.target[i, :ln], rng)
            masked[i, :ln] = mt.tokens
            mask[i, :ln] = mt.mask
            mixed[i, :ln] = substitute(mt, y_hat[i, :ln], beta, rng).tokens
        with T.no_grad():
            enc = model.encode(batch.source, mode="eval")
            p_mix = T.softmax(model.decode(mixed, enc, mode="eval"), -1).values.astype(np.float64)
            p_gt = T.softmax(model.decode(masked, enc, mode="eval"), -1).values.astype(np.float64)
        a, g = p_mix[mask], p_gt[mask]
        cos = (a * g).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(g, axis=-1))
        sims.append(np.clip(cos, -1.0, 1.0))
    sims = np.concatenate(sims)
    counts, edges = np.histogram(np.clip(sims, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return SimilarityReport([float(e) for e in edges], [int(c) for c in counts], float(sims.mean()), sims)
