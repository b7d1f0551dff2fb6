"""Versioned binary checkpoint container.

Layout::

    b"LKRCKPT\\0"            8-byte magic
    uint32 LE               format version
    uint32 LE               header length in bytes
    header                  UTF-8 JSON: hyperparameters + [(name, shape), ...]
    payload                 concatenated little-endian float32 arrays, header order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LKRCKPT\0"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], hyperparams: dict) -> None:
    entries = [[name, list(np.shape(a))] for name, a in arrays.items()]
    header = json.dumps({"hyperparams": hyperparams, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype=_F32).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (arrays as float32, hyperparams)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[16:16 + hlen])
    offset = 16 + hlen
    arrays = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {name!r}")
        arrays[name] = np.frombuffer(raw[offset:end], dtype=_F32).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, header["hyperparams"]
