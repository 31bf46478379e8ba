"""Versioned binary checkpoints.

Layout: magic ``CCLP``, u32 format version, u32 array count, then per
array a u32 name length + UTF-8 name, u32 rank, u32 dims, and raw 32-bit
little-endian float data; a UTF-8 JSON metadata blob trails the arrays.
All integers are little-endian. Saving is order-preserving, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CCLP"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
        fh.write(json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8"))


def load_checkpoint(path):
    """Returns (arrays, meta); arrays come back as float32-valued float64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (count,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
            offset += 4 * n
            arrays[name] = data.astype(np.float64)
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint: {e}") from e
    try:
        meta = json.loads(blob[offset:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad metadata blob: {e}") from e
    return arrays, meta
