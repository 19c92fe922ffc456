"""Compact transformer encoder-decoder for conditional masked language modeling.

The encoder prepends a ``[LENGTH]`` token; a linear head over that position's
final state classifies the target length.  The decoder attends over all
target positions (no causal mask) plus the encoder states, and its output
projection is tied to the shared token embedding.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .data import LENGTH, MASK, PAD
from .tensor import DTYPE, Tensor

NEG_INF = -1e9
Mode = Literal["train", "eval"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    model_dim: int = 64
    hidden_dim: int = 256
    layers_enc: int = 2
    layers_dec: int = 2
    heads: int = 4
    max_positions: int = 64
    max_length_bins: int = 64
    dropout_rate: float = 0.1
    seed: int = 1

    def validate(self) -> None:
        for name in ("vocab_size", "model_dim", "hidden_dim", "layers_enc", "layers_dec", "heads",
                     "max_positions", "max_length_bins"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"ModelConfig.{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


ParameterSet = dict  # name -> Tensor


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, v = cfg.model_dim, cfg.hidden_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (v, d),
        "out_bias": (v,),
        "enc.pos": (cfg.max_positions, d),
        "dec.pos": (cfg.max_positions, d),
        "enc.norm.gain": (d,),
        "enc.norm.bias": (d,),
        "dec.norm.gain": (d,),
        "dec.norm.bias": (d,),
        "length.w": (d, cfg.max_length_bins),
        "length.b": (cfg.max_length_bins,),
    }

    def attention(prefix):
        for p in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{p}"] = (d, d)
            shapes[f"{prefix}.b{p}"] = (d,)

    def norm(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, h)
        shapes[f"{prefix}.b1"] = (h,)
        shapes[f"{prefix}.w2"] = (h, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.layers_enc):
        attention(f"enc.{i}.self")
        norm(f"enc.{i}.norm1")
        ffn(f"enc.{i}.ffn")
        norm(f"enc.{i}.norm2")
    for i in range(cfg.layers_dec):
        attention(f"dec.{i}.self")
        norm(f"dec.{i}.norm1")
        attention(f"dec.{i}.cross")
        norm(f"dec.{i}.norm2")
        ffn(f"dec.{i}.ffn")
        norm(f"dec.{i}.norm3")
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Closed form for the number of scalar parameters.

    ``V*D + V`` (tied embedding + output bias), ``2*P*D`` (positions),
    ``4*D`` (final norms), ``D*M + M`` (length head), per encoder layer
    ``4*D*D + 4*D + 2*D*H + H + D + 4*D`` and per decoder layer
    ``8*D*D + 8*D + 2*D*H + H + D + 6*D``.
    """
    d, h, v, p, m = cfg.model_dim, cfg.hidden_dim, cfg.vocab_size, cfg.max_positions, cfg.max_length_bins
    ffn = 2 * d * h + h + d
    enc_layer = 4 * d * d + 4 * d + ffn + 4 * d
    dec_layer = 8 * d * d + 8 * d + ffn + 6 * d
    return v * d + v + 2 * p * d + 4 * d + d * m + m + cfg.layers_enc * enc_layer + cfg.layers_dec * dec_layer


def init_parameters(cfg: ModelConfig) -> ParameterSet:
    """Xavier-uniform matrices, zero biases, unit norm gains; seeded by ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params: ParameterSet = {}
    for name, shape in parameter_shapes(cfg).items():
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            vals = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            vals = np.ones(shape)
        else:
            vals = np.zeros(shape)
        params[name] = Tensor(vals.astype(DTYPE), requires_grad=True, name=name)
    return params


@dataclass
class EncoderOutput:
    states: Tensor  # (B, S+1, D); position 0 is the [LENGTH] slot
    length_logits: Tensor  # (B, max_length_bins)
    pad_mask: np.ndarray  # (B, S+1) True at PAD positions


class NATModel:
    """Binds a :class:`ModelConfig` to a parameter set.

    ``rng`` drives dropout and is only consulted in train mode.
    """

    def __init__(self, config: ModelConfig, params: ParameterSet | None = None):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_parameters(config)

    # -- pieces

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self._p(prefix + ".gain"), self._p(prefix + ".bias"))

    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        return T.add(T.matmul(x, self._p(w)), self._p(b))

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.config.heads
        return T.transpose(T.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))

    def _attention(self, prefix: str, query: Tensor, memory: Tensor, key_pad: np.ndarray,
                   trace: list | None) -> Tensor:
        b, n, d = query.shape
        h = self.config.heads
        q = self._split_heads(self._linear(query, prefix + ".wq", prefix + ".bq"))
        k = self._split_heads(self._linear(memory, prefix + ".wk", prefix + ".bk"))
        v = self._split_heads(self._linear(memory, prefix + ".wv", prefix + ".bv"))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d // h))
        scores = T.mask_fill(scores, key_pad[:, None, None, :], NEG_INF)
        weights = T.softmax(scores, axis=-1)
        if trace is not None:
            trace.append((prefix, weights.values.copy()))
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
        return self._linear(ctx, prefix + ".wo", prefix + ".bo")

    def _ffn(self, x: Tensor, prefix: str, training: bool, rng) -> Tensor:
        hidden = T.relu(self._linear(x, prefix + ".w1", prefix + ".b1"))
        hidden = T.dropout(hidden, self.config.dropout_rate, rng, training)
        return self._linear(hidden, prefix + ".w2", prefix + ".b2")

    def _check_ids(self, ids: np.ndarray, width: int, what: str) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(f"{what}: token id out of range [0, {self.config.vocab_size})")
        if width > self.config.max_positions:
            raise ValueError(f"{what}: length {width} exceeds max_positions {self.config.max_positions}")

    # -- public

    def encode(self, source_ids, mode: Mode = "eval", rng: np.random.Generator | None = None,
               trace: list | None = None) -> EncoderOutput:
        """Encode a (B, S) PAD-padded source batch (a 1-d sequence is promoted)."""
        src = np.atleast_2d(np.asarray(source_ids, dtype=np.int64))
        if src.shape[1] == 0:
            raise ValueError("encode: empty source")
        self._check_ids(src, src.shape[1] + 1, "encode")
        training = mode == "train"
        b, s = src.shape
        tokens = np.concatenate([np.full((b, 1), LENGTH, dtype=np.int64), src], axis=1)
        pad = tokens == PAD
        x = T.add(T.gather_rows(self._p("embed"), tokens), T.take(self._p("enc.pos"), slice(0, s + 1)))
        x = T.dropout(x, self.config.dropout_rate, rng, training)
        for i in range(self.config.layers_enc):
            pre = f"enc.{i}"
            hn = self._norm(x, pre + ".norm1")
            a = self._attention(pre + ".self", hn, hn, pad, trace)
            x = T.add(x, T.dropout(a, self.config.dropout_rate, rng, training))
            f = self._ffn(self._norm(x, pre + ".norm2"), pre + ".ffn", training, rng)
            x = T.add(x, T.dropout(f, self.config.dropout_rate, rng, training))
        states = self._norm(x, "enc.norm")
        length_state = T.take(states, (slice(None), 0))
        length_logits = self._linear(length_state, "length.w", "length.b")
        return EncoderOutput(states, length_logits, pad)

    def decode(self, decoder_tokens, enc: EncoderOutput, mode: Mode = "eval",
               rng: np.random.Generator | None = None, trace: list | None = None) -> Tensor:
        """Vocabulary logits (B, L, V) for a (B, L) decoder input that may hold [MASK]."""
        tgt = np.atleast_2d(np.asarray(decoder_tokens, dtype=np.int64))
        self._check_ids(tgt, tgt.shape[1], "decode")
        if tgt.shape[0] != enc.states.shape[0]:
            raise ValueError(f"decode: batch {tgt.shape[0]} != encoder batch {enc.states.shape[0]}")
        training = mode == "train"
        n = tgt.shape[1]
        pad = tgt == PAD
        y = T.add(T.gather_rows(self._p("embed"), tgt), T.take(self._p("dec.pos"), slice(0, n)))
        y = T.dropout(y, self.config.dropout_rate, rng, training)
        for i in range(self.config.layers_dec):
            pre = f"dec.{i}"
            hn = self._norm(y, pre + ".norm1")
            a = self._attention(pre + ".self", hn, hn, pad, trace)
            y = T.add(y, T.dropout(a, self.config.dropout_rate, rng, training))
            c = self._attention(pre + ".cross", self._norm(y, pre + ".norm2"), enc.states, enc.pad_mask, trace)
            y = T.add(y, T.dropout(c, self.config.dropout_rate, rng, training))
            f = self._ffn(self._norm(y, pre + ".norm3"), pre + ".ffn", training, rng)
            y = T.add(y, T.dropout(f, self.config.dropout_rate, rng, training))
        y = self._norm(y, "dec.norm")
        logits = T.matmul(y, T.transpose(self._p("embed"), (1, 0)))
        return T.add(logits, self._p("out_bias"))


def tile_encoder(enc: EncoderOutput, repeats: int) -> EncoderOutput:
    """Stack ``repeats`` copies along the batch axis (gradient flows to the original)."""
    if repeats == 1:
        return enc
    return EncoderOutput(
        T.concat([enc.states] * repeats, axis=0),
        T.concat([enc.length_logits] * repeats, axis=0),
        np.concatenate([enc.pad_mask] * repeats, axis=0),
    )


def select_encoder_rows(enc: EncoderOutput, rows: np.ndarray) -> EncoderOutput:
    """Non-differentiable row selection (inference only)."""
    rows = np.asarray(rows)
    return EncoderOutput(Tensor(enc.states.values[rows]), Tensor(enc.length_logits.values[rows]), enc.pad_mask[rows])


def length_candidates(length_logits, B: int = 5, offset: int = 0) -> list[int]:
    """Top-``B`` lengths by logit (ties to the shorter length); index ``i`` is length ``i + offset``.

    Lengths below 1 are never proposed.
    """
    logits = np.asarray(length_logits.values if isinstance(length_logits, Tensor) else length_logits,
                        dtype=np.float64).reshape(-1)
    lengths = np.arange(logits.size) + offset
    valid = lengths >= 1
    if B < 1:
        raise ValueError(f"length_candidates: B must be >= 1, got {B}")
    if B > int(valid.sum()):
        raise ValueError(f"length_candidates: B={B} exceeds the {int(valid.sum())} usable length bins")
    order = np.lexsort((lengths[valid], -logits[valid]))
    return [int(x) for x in lengths[valid][order][:B]]


def suppress_reserved(log_probs: np.ndarray) -> np.ndarray:
    """Forbid PAD/MASK/LENGTH as predictions (inference-time argmax helper)."""
    out = log_probs.copy()
    out[..., [PAD, MASK, LENGTH]] = -np.inf
    return out
