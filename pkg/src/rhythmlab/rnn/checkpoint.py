"""RLM1 checkpoint files.

Layout (little-endian): magic ``RLM1``, u32 version, u32 metadata length,
UTF-8 JSON metadata (labels, config, epoch), u32 tensor count, then per
tensor: u32 name length, name, u32 ndim, u32 dims..., float32 data.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import LstmModel

MAGIC = b"RLM1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: LstmModel, path):
    meta = json.dumps(
        {"labels": model.labels, "config": model.config, "epoch": model.epoch}, sort_keys=True
    ).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        values = struct.unpack(f"<{count}I", self.take(4 * count))
        return values[0] if count == 1 else values


def load_checkpoint(path) -> LstmModel:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an RLM1 checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return LstmModel(params, meta["labels"], meta["config"], meta["epoch"])
