"""Versioned checkpoint container.

Layout: 4-byte magic "DBP1", uint64 little-endian header length, UTF-8 JSON
header {"meta": {...}, "params": [{"name", "shape"}, ...]}, then the raw
row-major float64 little-endian buffers concatenated in header order.
Writes go to a temp file followed by an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"DBP1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {
        "meta": meta or {},
        "params": [{"name": name, "shape": list(arr.shape)} for name, arr in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for arr in params.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        params: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointError(f"{path}: truncated data for {entry['name']!r}")
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return params, header.get("meta", {})
