"""Binary checkpoint container for named float32 tensors.

Layout: magic "MDRG" | u32 version (1) | u64 metadata_len | UTF-8 JSON metadata
| concatenated little-endian float32 tensor blobs in manifest order.

The metadata JSON holds a free-form "config" object and a "tensors" manifest:
[{name, shape, dtype, offset}], sorted by name (canonical order), offsets
counted from the first blob byte. Writing is deterministic, so saving the same
state twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from typing import Any

import numpy as np

MAGIC = b"MDRG"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, config: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset}
        )
        data = arr.tobytes()
        blobs.append(data)
        offset += len(data)
    meta = json.dumps(
        {"config": config, "tensors": manifest}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(meta)))
        f.write(meta)
        for data in blobs:
            f.write(data)


def load_checkpoint(path: str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise CheckpointError(f"{path}: truncated checkpoint header")
        magic, version, meta_len = _HEADER.unpack(header)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        meta_raw = f.read(meta_len)
        if len(meta_raw) != meta_len:
            raise CheckpointError(f"{path}: truncated metadata")
        meta = json.loads(meta_raw.decode("utf-8"))
        blob = f.read()
    tensors: dict[str, np.ndarray] = {}
    for entry in meta["tensors"]:
        if entry["dtype"] != "f32":
            raise CheckpointError(f"{path}: unsupported tensor dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: tensor {entry['name']!r} extends past end of file")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return meta["config"], tensors
