"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"MNAT1"                      magic
    u32 version
    u32 n, n bytes                ModelConfig as UTF-8 JSON (sorted keys)
    u32 count                     number of parameters
    per parameter, sorted by name:
        u16 n, n bytes            name
        u8 ndim, ndim * u32       shape
    per parameter, same order:    float32 payload
    u64 adam step
    per parameter, same order:    float32 first moment, then float32 second moment
    u64 training step

A file written without optimizer state stores zero moments and step 0.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig
from .optim import AdamState
from .tensor import DTYPE, Tensor

MAGIC = b"MNAT1"
VERSION = 1
LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    step: int

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}


def _arrays(params: Mapping) -> dict[str, np.ndarray]:
    return {k: np.asarray(v.values if isinstance(v, Tensor) else v, dtype=DTYPE) for k, v in params.items()}


def encode_checkpoint(config: ModelConfig, params: Mapping, adam: AdamState | None = None, step: int = 0) -> bytes:
    arrays = _arrays(params)
    names = sorted(arrays)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        shape = arrays[name].shape
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
    for name in names:
        buf.write(arrays[name].astype(LE_F32).tobytes())
    buf.write(struct.pack("<Q", adam.step if adam else 0))
    for name in names:
        for moments in ((adam.m, adam.v) if adam else ({}, {})):
            arr = moments.get(name)
            if arr is None:
                arr = np.zeros(arrays[name].shape, dtype=DTYPE)
            buf.write(np.asarray(arr, dtype=LE_F32).tobytes())
    buf.write(struct.pack("<Q", step))
    return buf.getvalue()


def save_checkpoint(path: str | Path, config: ModelConfig, params: Mapping, adam: AdamState | None = None,
                    step: int = 0) -> Path:
    """Write atomically: temp file in the target directory, fsync, rename."""
    path = Path(path)
    data = encode_checkpoint(config, params, adam, step)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an MNAT checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.unpack("<I")
    config = ModelConfig.from_dict(json.loads(r.take(n).decode("utf-8")))
    (count,) = r.unpack("<I")
    specs = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        specs.append((name, tuple(shape)))

    def read_array(shape):
        size = int(np.prod(shape)) if shape else 1
        return np.frombuffer(r.take(4 * size), dtype=LE_F32).astype(DTYPE).reshape(shape)

    params = {name: read_array(shape) for name, shape in specs}
    (adam_step,) = r.unpack("<Q")
    m, v = {}, {}
    for name, shape in specs:
        m[name] = read_array(shape)
        v[name] = read_array(shape)
    (step,) = r.unpack("<Q")
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(config, params, AdamState(m, v, adam_step), step)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
