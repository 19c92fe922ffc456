"""Error-exposure training with consistency regularization (EECR) for a CMLM.

One update:

1. sample a mask per target sentence (uniform count, uniform positions);
2. run ``k ~ U{1..K}`` mask-predict iterations from an all-[MASK] input of
   the true length, without gradients and with dropout off, giving Y_hat;
3. twice, replace each observed ground-truth token by its Y_hat counterpart
   with probability ``beta``, giving mixed inputs Y1 and Y2;
4. decode Y1, Y2 and the masked ground truth, and combine three masked-token
   NLLs, two symmetric-KL consistency terms and the length loss.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import MASK, PAD, Batch, SentencePair, batch_by_tokens
from .decoding import refine
from .model import NATModel, tile_encoder
from .optim import AdamState, adam_step, lr_at_step
from .tensor import DTYPE, Tensor

log = logging.getLogger(__name__)

KL_FLOOR = 1e-9
LOG_FIELDS = ("step", "nll1", "nll2", "nll3", "kld1", "kld2", "len", "total", "lr", "k_used")


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------ records


@dataclass
class MaskedTarget:
    tokens: np.ndarray  # ground truth with [MASK] at masked positions
    mask: np.ndarray  # bool, True on Y_mask
    truth: np.ndarray

    @property
    def masked_positions(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.mask)]

    @property
    def observed_positions(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~self.mask)]


@dataclass
class MixedSequence:
    tokens: np.ndarray
    predicted: np.ndarray  # bool, True where an observed token came from Y_hat
    mask: np.ndarray

    @property
    def provenance(self) -> list[str]:
        return ["masked" if m else ("predicted" if p else "ground_truth") for m, p in zip(self.mask, self.predicted)]


@dataclass
class LossBreakdown:
    nll1: float
    nll2: float
    nll3: float
    kld1: float
    kld2: float
    len_loss: float
    total: float
    gamma: float
    beta: float
    k_used: int

    def recomposed_total(self, cr_sign: float = 1.0) -> float:
        return (self.nll1 + self.nll2 + self.nll3) / 3 + cr_sign * self.gamma * (self.kld1 + self.kld2) / 3 + self.len_loss


@dataclass
class TrainConfig:
    beta: float = 0.3
    gamma: float = 0.4
    K: int = 10
    label_smoothing: float = 0.1
    base_lr: float = 5e-4
    warmup: int = 10000
    token_budget: int = 4096
    max_updates: int = 300000
    max_epochs: int | None = None
    checkpoint_every: int = 1000
    average_last: int = 10
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    objective: str = "eecr"  # "cmlm" trains nll3 + len only (vanilla reference)
    cr_sign: float = 1.0
    seed: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.objective not in ("eecr", "cmlm"):
            raise ValueError(f"objective must be 'eecr' or 'cmlm', got {self.objective!r}")
        if self.cr_sign not in (1.0, -1.0):
            raise ValueError(f"cr_sign must be +1 or -1, got {self.cr_sign}")
        for name in ("token_budget", "max_updates", "checkpoint_every", "average_last", "warmup"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ------------------------------------------------------------------ sampling


def sample_mask(target, rng: np.random.Generator) -> MaskedTarget:
    """Mask ``m ~ U{1..n}`` positions chosen uniformly without replacement."""
    truth = np.asarray(target, dtype=np.int64)
    n = truth.size
    if n < 1:
        raise ValueError("sample_mask: empty target")
    m = int(rng.integers(1, n + 1))
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=m, replace=False)] = True
    return MaskedTarget(np.where(mask, MASK, truth), mask, truth)


def substitute(masked: MaskedTarget, y_hat, beta: float, rng: np.random.Generator) -> MixedSequence:
    """Swap each observed token for ``y_hat`` when ``s <= beta``, ``s ~ U(0, 1]``."""
    y_hat = np.asarray(y_hat, dtype=np.int64)
    if y_hat.shape != masked.tokens.shape:
        raise ValueError(f"substitute: y_hat length {y_hat.shape} != target length {masked.tokens.shape}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"substitute: beta must be in [0, 1], got {beta}")
    s = 1.0 - rng.random(masked.tokens.shape)
    predicted = (~masked.mask) & (s <= beta)
    return MixedSequence(np.where(predicted, y_hat, masked.tokens), predicted, masked.mask)


def refine_predict(model: NATModel, source, target_lengths, K: int, rng: np.random.Generator):
    """Predict Y_hat with ``k ~ U{1..K}`` refinement iterations; returns ``(tokens, k)``.

    Runs in eval mode with no graph recorded.  ``source`` is a PAD-padded
    (B, S) array (or one sequence); output rows are PAD beyond each length.
    """
    if K < 1:
        raise ValueError(f"refine_predict: K must be >= 1, got {K}")
    lengths = np.atleast_1d(np.asarray(target_lengths, dtype=np.int64))
    if lengths.max() > model.config.max_positions:
        raise ValueError(f"refine_predict: target length {lengths.max()} exceeds max_positions")
    k = int(rng.integers(1, K + 1))
    with T.no_grad():
        enc = model.encode(source, mode="eval")
        res = refine(model, enc, lengths, k)
    return res.tokens, k


# ------------------------------------------------------------------ losses


def nll_masked(log_probs: Tensor, ground_truth, mask, label_smoothing: float = 0.0) -> Tensor:
    """Label-smoothed NLL over masked positions.

    Per sentence: ``(1-eps)*(-log p(y_t)) + eps*mean_v(-log p(v))`` averaged
    over that sentence's masked positions; then averaged over sentences.
    Accepts (L, V) or (B, L, V) log-probabilities.
    """
    truth = np.atleast_2d(np.asarray(ground_truth, dtype=np.int64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    lp = log_probs if log_probs.ndim == 3 else T.reshape(log_probs, (1,) + log_probs.shape)
    b, n, v = lp.shape
    if truth.shape != (b, n) or mask.shape != (b, n):
        raise ValueError(f"nll_masked: log_probs {lp.shape}, truth {truth.shape}, mask {mask.shape}")
    per_sent = mask.sum(axis=1)
    if (per_sent == 0).any():
        raise ValueError("nll_masked: a sentence has an empty Y_mask")
    eps = float(label_smoothing)
    weights = np.zeros((b, n, v), dtype=np.float64)
    weights[np.arange(b)[:, None], np.arange(n)[None, :], np.where(mask, truth, 0)] = 1.0 - eps
    weights += eps / v
    weights *= (mask / per_sent[:, None])[..., None] / b
    return T.scale(T.sum(T.mul(lp, Tensor(weights.astype(DTYPE)))), -1.0)


def _sym_kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Elementwise-over-rows ``0.5*[KL(p||q) + KL(q||p)]`` = ``0.5*sum (p-q)(log p - log q)``."""
    return T.sym_kl(p, q, KL_FLOOR)


def symmetric_kl(p, q, tol: float = 1e-6) -> Tensor:
    """Symmetric KL between two probability vectors (probabilities floored at 1e-9)."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    q = q if isinstance(q, Tensor) else Tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"symmetric_kl: shape mismatch {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        total = t.values.astype(np.float64).sum(axis=-1)
        if np.any(np.abs(total - 1.0) > tol) or np.any(t.values < 0):
            raise ValueError(f"symmetric_kl: {name} is not a probability vector (sums to {total})")
    return _sym_kl_rows(p, q)


def _masked_mean(per_pos: Tensor, mask: np.ndarray) -> Tensor:
    """Per-sentence mean over masked positions, then batch mean."""
    b = mask.shape[0]
    w = mask / mask.sum(axis=1, keepdims=True) / b
    return T.sum(T.mul(per_pos, Tensor(w.astype(DTYPE))))


def consistency_losses(dist1: Tensor, dist2: Tensor, dist3: Tensor, mask) -> tuple[Tensor, Tensor]:
    """Symmetric-KL penalties between the three views at the shared masked positions.

    ``kld1`` compares the two mixed views; ``kld2`` sums each mixed view's
    divergence from the ground-truth view, divided by n (not 2n).
    Distributions are (L, V) or (B, L, V) probabilities.
    """
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    dists = [d if d.ndim == 3 else T.reshape(d, (1,) + d.shape) for d in (dist1, dist2, dist3)]
    for d in dists:
        if d.shape[:2] != mask.shape:
            raise ValueError(f"consistency_losses: distribution {d.shape} does not match mask {mask.shape}")
    if (mask.sum(axis=1) == 0).any():
        raise ValueError("consistency_losses: empty Y_mask")
    d1, d2, d3 = dists
    kld1 = _masked_mean(_sym_kl_rows(d1, d2), mask)
    kld2 = _masked_mean(T.add(_sym_kl_rows(d1, d3), _sym_kl_rows(d2, d3)), mask)
    return kld1, kld2


def length_loss(length_logits: Tensor, true_length) -> Tensor:
    """Mean cross-entropy of the length classifier at the true-length bins."""
    logits = length_logits if length_logits.ndim == 2 else T.reshape(length_logits, (1, -1))
    true = np.atleast_1d(np.asarray(true_length, dtype=np.int64))
    b, m = logits.shape
    if true.shape != (b,):
        raise ValueError(f"length_loss: {true.shape[0]} lengths for batch of {b}")
    if true.min() < 0 or true.max() >= m:
        raise ValueError(f"length_loss: true length {true.max()} outside bins [0, {m})")
    onehot = np.zeros((b, m), dtype=DTYPE)
    onehot[np.arange(b), true] = 1.0 / b
    return T.scale(T.sum(T.mul(T.log_softmax(logits, axis=-1), Tensor(onehot))), -1.0)


def total_loss(nll1: Tensor, nll2: Tensor, nll3: Tensor, kld1: Tensor, kld2: Tensor, len_loss: Tensor,
               gamma: float, cr_sign: float = 1.0) -> Tensor:
    nll = T.scale(T.add(T.add(nll1, nll2), nll3), 1.0 / 3.0)
    cr = T.scale(T.add(kld1, kld2), cr_sign * gamma / 3.0)
    return T.add(T.add(nll, cr), len_loss)


# ------------------------------------------------------------------ one update


@dataclass
class UpdateInputs:
    """Decoder inputs for one batch; arrays are (B, L)."""

    masked: np.ndarray
    mask: np.ndarray
    mixed1: np.ndarray
    mixed2: np.ndarray
    k_used: int


def prepare_inputs(model: NATModel, batch: Batch, cfg: TrainConfig, mask_rng, refine_rng, subst_rng) -> UpdateInputs:
    tgt = batch.target
    b, n = tgt.shape
    masked = np.full((b, n), PAD, dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    mts = []
    for i in range(b):
        mt = sample_mask(tgt[i, : batch.target_lengths[i]], mask_rng)
        mts.append(mt)
        masked[i, : mt.tokens.size] = mt.tokens
        mask[i, : mt.tokens.size] = mt.mask
    if cfg.objective == "cmlm":
        return UpdateInputs(masked, mask, masked, masked, 0)
    if cfg.beta > 0:
        y_hat, k = refine_predict(model, batch.source, batch.target_lengths, cfg.K, refine_rng)
    else:
        # nothing can be substituted, so the prediction pass is skipped (k is still drawn)
        k = int(refine_rng.integers(1, cfg.K + 1))
        y_hat = np.where(tgt == PAD, PAD, MASK)
    mixed = []
    for _ in range(2):
        rows = np.full((b, n), PAD, dtype=np.int64)
        for i, mt in enumerate(mts):
            rows[i, : mt.tokens.size] = substitute(mt, y_hat[i, : mt.tokens.size], cfg.beta, subst_rng).tokens
        mixed.append(rows)
    return UpdateInputs(masked, mask, mixed[0], mixed[1], k)


def compute_loss(model: NATModel, batch: Batch, inputs: UpdateInputs, cfg: TrainConfig,
                 dropout_rng: np.random.Generator | None, mode: str = "train") -> tuple[Tensor, LossBreakdown]:
    """Forward pass for one batch; returns the differentiable total and its parts."""
    enc = model.encode(batch.source, mode=mode, rng=dropout_rng)
    len_l = length_loss(enc.length_logits, batch.target_lengths)
    truth = batch.target
    if cfg.objective == "cmlm":
        logits = model.decode(inputs.masked, enc, mode=mode, rng=dropout_rng)
        nll3 = nll_masked(T.log_softmax(logits, -1), truth, inputs.mask, cfg.label_smoothing)
        total = T.add(nll3, len_l)
        v3 = nll3.item()
        return total, _breakdown([v3, v3, v3, 0.0, 0.0, len_l.item()], cfg, inputs.k_used)
    b = truth.shape[0]
    stacked = np.concatenate([inputs.mixed1, inputs.mixed2, inputs.masked], axis=0)
    logits = model.decode(stacked, tile_encoder(enc, 3), mode=mode, rng=dropout_rng)
    lp = T.log_softmax(logits, -1)
    views = [slice(i * b, (i + 1) * b) for i in range(3)]
    nlls = [nll_masked(T.take(lp, v), truth, inputs.mask, cfg.label_smoothing) for v in views]
    if cfg.gamma > 0:
        probs = T.softmax(logits, -1)
        kld1, kld2 = consistency_losses(*(T.take(probs, v) for v in views), inputs.mask)
    else:
        # gamma = 0 removes the term; values are still reported
        with T.no_grad():
            probs = T.softmax(logits, -1)
            kld1, kld2 = consistency_losses(*(T.take(probs, v) for v in views), inputs.mask)
    total = total_loss(*nlls, kld1, kld2, len_l, cfg.gamma, cfg.cr_sign)
    parts = [t.item() for t in (*nlls, kld1, kld2, len_l)]
    return total, _breakdown(parts, cfg, inputs.k_used)


def _breakdown(parts: list[float], cfg: TrainConfig, k_used: int) -> LossBreakdown:
    # The reported total is the weighted sum of the reported parts in float64.
    # The float32 graph total can differ from it by a few ulps (about 1e-6 at
    # loss 8), which would blur the logged decomposition.
    br = LossBreakdown(*parts, total=0.0, gamma=cfg.gamma, beta=cfg.beta, k_used=k_used)
    br.total = br.recomposed_total(cfg.cr_sign)
    return br


def parameter_grads(model: NATModel, total: Tensor) -> dict[str, np.ndarray]:
    T.zero_grads(model.params.values())
    T.backward(total)
    return {k: (p.grad if p.grad is not None else np.zeros(p.shape, dtype=DTYPE)) for k, p in model.params.items()}


# ------------------------------------------------------------------ training loop


def format_log_line(step: int, br: LossBreakdown, lr: float) -> str:
    vals = [br.nll1, br.nll2, br.nll3, br.kld1, br.kld2, br.len_loss, br.total, lr]
    return "\t".join([str(step)] + [format(v, ".9g") for v in vals] + [str(br.k_used)])


def parse_log_line(line: str) -> dict:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != len(LOG_FIELDS):
        raise ValueError(f"log line has {len(parts)} fields, expected {len(LOG_FIELDS)}")
    out = {k: float(v) for k, v in zip(LOG_FIELDS, parts)}
    out["step"] = int(parts[0])
    out["k_used"] = int(parts[-1])
    return out


@dataclass
class TrainResult:
    model: NATModel
    adam: AdamState
    history: list[LossBreakdown]
    checkpoints: list[Path] = field(default_factory=list)
    snapshots: list[dict[str, np.ndarray]] = field(default_factory=list)
    updates: int = 0
    epochs: int = 0

    def averaged(self) -> dict[str, Tensor]:
        return average_checkpoints(self.snapshots)


def _rng_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("mask", "refine", "subst", "dropout")
    children = np.random.SeedSequence(seed).spawn(len(names) + 1)
    out = {n: np.random.default_rng(c) for n, c in zip(names, children)}
    out["batch"] = np.random.default_rng(children[-1])
    return out


def train(
    pairs: Sequence[SentencePair],
    model: NATModel,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    on_update: Callable[[int, LossBreakdown], None] | None = None,
    on_epoch_end: Callable[[int, NATModel], bool] | None = None,
) -> TrainResult:
    """Optimize ``model`` in place; see the module docstring for one update.

    Checkpoints go to ``out_dir/ckpt_<step>.mnat`` every ``checkpoint_every``
    updates and after the last one; the latest ``average_last`` snapshots are
    also kept in memory.  ``on_epoch_end`` returning True stops training.
    """
    cfg.validate()
    if not pairs:
        raise TrainingError("train: no training pairs")
    longest = max(len(p.target) for p in pairs)
    if longest >= model.config.max_length_bins:
        raise TrainingError(f"target length {longest} needs max_length_bins > {longest}")
    rngs = _rng_streams(cfg.seed)
    adam = AdamState.zeros_like(model.params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    result = TrainResult(model, adam, [])
    recent: deque = deque(maxlen=cfg.average_last)
    step = 0
    epoch = 0

    def checkpoint():
        snap = {k: p.values.copy() for k, p in model.params.items()}
        recent.append(snap)
        if out is not None:
            path = out / f"ckpt_{step:07d}.mnat"
            try:
                save_checkpoint(path, model.config, model.params, adam, step)
            except OSError as exc:
                raise TrainingError(f"checkpoint write failed at step {step}: {exc}") from exc
            result.checkpoints.append(path)

    try:
        while step < cfg.max_updates and (cfg.max_epochs is None or epoch < cfg.max_epochs):
            epoch_seed = int(rngs["batch"].integers(2**31))
            for batch in batch_by_tokens(pairs, cfg.token_budget, epoch_seed):
                step += 1
                inputs = prepare_inputs(model, batch, cfg, rngs["mask"], rngs["refine"], rngs["subst"])
                total, br = compute_loss(model, batch, inputs, cfg, rngs["dropout"])
                if not math.isfinite(br.total):
                    raise TrainingError(f"non-finite loss at step {step}")
                grads = parameter_grads(model, total)
                lr = lr_at_step(step, cfg.base_lr, cfg.warmup)
                adam_step(model.params, grads, adam, lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps,
                          cfg.weight_decay)
                result.history.append(br)
                line = format_log_line(step, br, lr)
                if log_fh:
                    log_fh.write(line + "\n")
                log.debug(line)
                if on_update:
                    on_update(step, br)
                if step % cfg.checkpoint_every == 0:
                    checkpoint()
                if step >= cfg.max_updates:
                    break
            epoch += 1
            log.info("epoch %d done at update %d: total=%.4f", epoch, step, result.history[-1].total)
            if on_epoch_end and on_epoch_end(epoch, model):
                break
        if step % cfg.checkpoint_every != 0:
            checkpoint()
    finally:
        if log_fh:
            log_fh.close()
    T.zero_grads(model.params.values())
    result.snapshots = list(recent)
    result.updates = step
    result.epochs = epoch
    return result


# ------------------------------------------------------------------ averaging


def average_checkpoints(sources: Sequence) -> dict[str, Tensor]:
    """Elementwise mean of parameter sets given as paths, Checkpoints or name->array maps."""
    if not sources:
        raise ValueError("average_checkpoints: need at least one checkpoint")
    sets: list[Mapping[str, np.ndarray]] = []
    for src in sources:
        if isinstance(src, (str, Path)):
            src = load_checkpoint(src)
        if isinstance(src, Checkpoint):
            src = src.params
        sets.append({k: (v.values if isinstance(v, Tensor) else np.asarray(v)) for k, v in src.items()})
    names = sorted(sets[0])
    for s in sets[1:]:
        if sorted(s) != names:
            raise ValueError("average_checkpoints: parameter names differ across checkpoints")
        for k in names:
            if s[k].shape != sets[0][k].shape:
                raise ValueError(f"average_checkpoints: shape mismatch for {k}: {s[k].shape} vs {sets[0][k].shape}")
    out = {}
    for k in names:
        acc = np.zeros(sets[0][k].shape, dtype=np.float64)
        for s in sets:
            acc += s[k]
        out[k] = Tensor((acc / len(sets)).astype(DTYPE), requires_grad=True, name=k)
    return out
