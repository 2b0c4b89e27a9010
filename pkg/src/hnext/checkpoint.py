"""Checkpoint files: the network config plus named float64 tensors.

Byte layout (integers little-endian)::

    magic        8 bytes  b"HNXCKPT1"
    config_len   u32, then config_len bytes of UTF-8 JSON (the NetworkConfig)
    count        u32 number of tensors
    per tensor:
        kind     u8  (0 = trainable parameter, 1 = buffer)
        name     u16 length + UTF-8 bytes
        ndim     u8, then ndim x u32 dimensions
        payload  prod(dims) x f64
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import NetworkConfig, from_dict, to_dict
from .errors import FormatError, LengthError
from .model import ParamStore

__all__ = ["save_checkpoint", "load_checkpoint", "checkpoint_bytes"]

MAGIC = b"HNXCKPT1"


def checkpoint_bytes(config: NetworkConfig, params: ParamStore) -> bytes:
    cfg = json.dumps(to_dict(config), sort_keys=True).encode("utf-8")
    entries = [(0, n, a) for n, a in params.params.items()]
    entries += [(1, n, a) for n, a in params.buffers.items()]
    out = [MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(entries))]
    for kind, name, arr in entries:
        key = name.encode("utf-8")
        out.append(struct.pack("<BH", kind, len(key)) + key)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(path, config: NetworkConfig, params: ParamStore) -> None:
    Path(path).write_bytes(checkpoint_bytes(config, params))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise LengthError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[NetworkConfig, ParamStore]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    r = _Reader(raw, path)
    r.take(8)
    (cfg_len,) = r.unpack("<I")
    config = from_dict(NetworkConfig, json.loads(r.take(cfg_len).decode("utf-8")))
    (count,) = r.unpack("<I")
    store = ParamStore()
    for _ in range(count):
        kind, name_len = r.unpack("<BH")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        store.add(name, arr, buffer=bool(kind))
    if r.pos != len(raw):
        raise LengthError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return config, store
