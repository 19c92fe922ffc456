"""Mask-predict inference with noisy parallel decoding over length candidates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import MASK, PAD, pad_sequences
from .model import EncoderOutput, NATModel, length_candidates, select_encoder_rows, suppress_reserved


def masking_schedule(n: int, t: int, T_total: int) -> int:
    """Number of tokens re-masked before iteration ``t + 1`` of ``T_total``."""
    if n < 1:
        raise ValueError(f"masking_schedule: n must be >= 1, got {n}")
    if not 1 <= t < T_total:
        raise ValueError(f"masking_schedule: need 1 <= t < T, got t={t}, T={T_total}")
    return (n * (T_total - t)) // T_total


def select_lowest_confidence(confidences, k: int) -> list[int]:
    """Indices of the ``k`` smallest confidences, ties to the lower index, ascending."""
    conf = np.asarray(confidences, dtype=np.float64)
    if k > conf.size or k < 0:
        raise ValueError(f"select_lowest_confidence: k={k} not in [0, {conf.size}]")
    order = np.argsort(conf, kind="stable")
    return sorted(int(i) for i in order[:k])


@dataclass
class RefineStep:
    iteration: int  # 2-based index of the iteration that produced `after`
    before: np.ndarray
    masked: np.ndarray  # bool, re-masked positions
    after: np.ndarray
    rows: np.ndarray  # which batch rows were still active


@dataclass
class RefineResult:
    tokens: np.ndarray  # (N, L) PAD beyond each length
    confidences: np.ndarray  # (N, L), 1.0 at pads
    lengths: np.ndarray
    iterations: np.ndarray  # decoder passes actually run per row
    steps: list[RefineStep] = field(default_factory=list)

    def scores(self) -> np.ndarray:
        """Mean log-probability of each row's final tokens."""
        valid = np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]
        logc = np.where(valid, np.log(np.maximum(self.confidences, 1e-30)), 0.0)
        return logc.sum(axis=1) / self.lengths


def _predict(model: NATModel, tokens: np.ndarray, enc: EncoderOutput) -> np.ndarray:
    logits = model.decode(tokens, enc, mode="eval")
    return suppress_reserved(T.log_softmax(logits, axis=-1).values.astype(np.float64))


def refine(model: NATModel, enc: EncoderOutput, lengths, T_total: int, early_stop: bool = True,
           keep_steps: bool = False) -> RefineResult:
    """Run up to ``T_total`` mask-predict iterations for each row of ``enc``.

    Iteration 1 predicts every position from an all-[MASK] input.  Each later
    iteration re-masks the ``masking_schedule`` lowest-confidence positions,
    re-decodes, and overwrites only those positions.  Confidences of kept
    tokens are refreshed to their probability under the latest pass.  A row
    stops as soon as an iteration leaves its tokens unchanged.
    """
    if T_total < 1:
        raise ValueError(f"refine: iteration count must be >= 1, got {T_total}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("refine: target lengths must be >= 1")
    if lengths.max() > model.config.max_positions:
        raise ValueError(f"refine: length {lengths.max()} exceeds max_positions {model.config.max_positions}")
    n_rows = lengths.size
    width = int(lengths.max())
    valid = np.arange(width)[None, :] < lengths[:, None]
    with T.no_grad():
        tokens = np.where(valid, MASK, PAD).astype(np.int64)
        lp = _predict(model, tokens, enc)
        tokens = np.where(valid, lp.argmax(-1), PAD)
        conf = np.where(valid, np.exp(lp.max(-1)), 1.0)
        iterations = np.ones(n_rows, dtype=np.int64)
        active = np.ones(n_rows, dtype=bool)
        steps = []
        for t in range(1, T_total):
            rows = np.flatnonzero(active)
            if rows.size == 0:
                break
            sub_valid = valid[rows]
            counts = (lengths[rows] * (T_total - t)) // T_total
            ranked = np.argsort(np.where(sub_valid, conf[rows], np.inf), axis=1, kind="stable")
            rank = np.empty_like(ranked)
            np.put_along_axis(rank, ranked, np.arange(width)[None, :].repeat(rows.size, 0), axis=1)
            masked = (rank < counts[:, None]) & sub_valid
            before = tokens[rows]
            sub_enc = enc if rows.size == n_rows else select_encoder_rows(enc, rows)
            lp = _predict(model, np.where(masked, MASK, before), sub_enc)
            after = np.where(masked, lp.argmax(-1), before)
            kept_lp = np.take_along_axis(lp, after[..., None], axis=-1)[..., 0]
            new_conf = np.where(masked, np.exp(lp.max(-1)), np.exp(kept_lp))
            tokens[rows] = after
            conf[rows] = np.where(sub_valid, new_conf, 1.0)
            iterations[rows] += 1
            if keep_steps:
                steps.append(RefineStep(t + 1, before, masked, after, rows))
            if early_stop:
                unchanged = (after == before).all(axis=1)
                active[rows[unchanged]] = False
    return RefineResult(tokens, conf, lengths, iterations, steps)


@dataclass
class Translation:
    tokens: list[int]
    score: float
    length: int
    candidate: int
    iterations: int


def translate_batch(model: NATModel, sources, T_total: int = 10, B: int = 5) -> list[Translation]:
    """Mask-predict with ``B`` length candidates per source; keeps the best-scoring one.

    Ranking: higher mean log-probability, then shorter length, then the
    candidate's rank under the length predictor.
    """
    sources = [list(s) for s in sources]
    if not sources:
        return []
    with T.no_grad():
        enc = model.encode(pad_sequences(sources), mode="eval")
        rows, lens = [], []
        for i in range(len(sources)):
            cands = length_candidates(enc.length_logits.values[i], B)
            rows.extend([i] * B)
            lens.extend(cands)
        rows = np.array(rows)
        lens = np.array(lens)
        if lens.max() > model.config.max_positions:
            raise ValueError(f"candidate length {lens.max()} exceeds max_positions {model.config.max_positions}")
        res = refine(model, select_encoder_rows(enc, rows), lens, T_total)
    scores = res.scores()
    out = []
    for i in range(len(sources)):
        block = range(i * B, (i + 1) * B)
        best = min(block, key=lambda r: (-scores[r], lens[r], r - i * B))
        out.append(Translation(
            tokens=[int(x) for x in res.tokens[best, : lens[best]]],
            score=float(scores[best]),
            length=int(lens[best]),
            candidate=best - i * B,
            iterations=int(res.iterations[best]),
        ))
    return out


def mask_predict(model: NATModel, source, T_total: int = 10, B: int = 5) -> tuple[list[int], float]:
    """Translate one source sentence; returns (token ids, mean log-probability)."""
    tr = translate_batch(model, [source], T_total, B)[0]
    return tr.tokens, tr.score


def translate_corpus(model: NATModel, sources, T_total: int = 10, B: int = 5,
                     batch_size: int = 256) -> list[Translation]:
    out = []
    for start in range(0, len(sources), batch_size):
        out.extend(translate_batch(model, sources[start:start + batch_size], T_total, B))
    return out
