"""Self-describing checkpoint container.

Layout: magic ``PMCK``, u16 version, u32 header length, a JSON header
(config block plus one entry per tensor: name, shape, trainable flag,
byte offset), then the raw little-endian f32 tensor data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], trainable: dict[str, bool],
                    config: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape),
                        "trainable": bool(trainable.get(name, False)),
                        "offset": offset, "nbytes": data.nbytes})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"config": config or {}, "dtype": "<f4", "tensors": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, bool], dict]:
    """Returns (tensors as f64 arrays, trainable flags, config block)."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[_PREFIX.size:start])
    tensors, flags = {}, {}
    for e in header["tensors"]:
        lo = start + e["offset"]
        if len(raw) < lo + e["nbytes"]:
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=lo)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
        flags[e["name"]] = e["trainable"]
    return tensors, flags, header["config"]
