"""Flat ``key = value`` run configuration with dotted section keys.

Precedence when merging: command-line flag > config file > built-in default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .eecr import TrainConfig
from .model import ModelConfig


class ConfigFileError(ValueError):
    pass


MODEL_KEYS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
PATH_KEYS = ("train", "valid", "test", "vocab", "checkpoint_dir", "checkpoint", "input", "output",
             "hyp", "ref", "corpus", "figure", "log")
DECODE_DEFAULTS = {"iterations": 10, "candidates": 5, "batch_size": 256}
PROBE_DEFAULTS = {"beta": 0.3, "K": 10, "sample_size": 500, "seed": 1}
SYNTH_DEFAULTS = {"kind": "lexicon", "vocab_size": 64, "count": 1000, "max_len": 12, "min_len": 1,
                  "seed": 1, "table_seed": None}

# keys whose value type is not derivable from a dataclass
_TYPES: dict[str, type] = {
    **{f"decode.{k}": int for k in DECODE_DEFAULTS},
    "probe.beta": float, "probe.K": int, "probe.sample_size": int, "probe.seed": int,
    "synth.kind": str, "synth.vocab_size": int, "synth.count": int, "synth.max_len": int,
    "synth.min_len": int, "synth.seed": int, "synth.table_seed": int,
    **{f"paths.{k}": str for k in PATH_KEYS},
}


def _dataclass_type(section: str, name: str) -> type | None:
    table = MODEL_KEYS if section == "model" else TRAIN_KEYS if section == "train" else None
    if table is None or name not in table:
        return None
    t = str(table[name])
    if "int" in t and "None" in t:
        return int
    return {"int": int, "float": float, "str": str}.get(t, None)


def key_type(key: str) -> type:
    if key in _TYPES:
        return _TYPES[key]
    section, _, name = key.partition(".")
    t = _dataclass_type(section, name)
    if t is None:
        raise ConfigFileError(f"unknown configuration key {key!r}")
    return t


def coerce(key: str, raw: Any) -> Any:
    t = key_type(key)
    if raw is None or isinstance(raw, t):
        return raw
    try:
        if t is int:
            return int(str(raw), 10)
        return t(raw)
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {raw!r} as {t.__name__}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigFileError(f"{origin}:{lineno}: key {key!r} needs a section prefix such as 'train.'")
        out[key] = coerce(key, value)
    return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, str(path))


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def path(self, name: str) -> Path | None:
        v = self.values.get(f"paths.{name}")
        return Path(v) if v else None

    def model_config(self, vocab_size: int) -> ModelConfig:
        kwargs = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("model.")}
        kwargs["vocab_size"] = vocab_size
        return ModelConfig(**kwargs)

    def train_config(self) -> TrainConfig:
        kwargs = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("train.")}
        return TrainConfig(**kwargs)

    def decode(self, name: str) -> int:
        return self.values.get(f"decode.{name}", DECODE_DEFAULTS[name])

    def probe(self, name: str):
        return self.values.get(f"probe.{name}", PROBE_DEFAULTS[name])

    def synth(self, name: str):
        return self.values.get(f"synth.{name}", SYNTH_DEFAULTS[name])


def merge(file_values: Mapping[str, Any], flag_values: Mapping[str, Any]) -> RunConfig:
    """Flags that were given (not None) override file values; absent keys fall back to defaults."""
    merged = dict(file_values)
    for k, v in flag_values.items():
        if v is not None:
            merged[k] = coerce(k, v)
    return RunConfig(merged)
