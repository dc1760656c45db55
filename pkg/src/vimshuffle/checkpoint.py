"""Checkpoint container: magic "SLWSCKPT", version 1, named float32 tensors."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SLWSCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict) -> None:
    """Write {name: array-like} as the versioned little-endian container."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(getattr(value, "data", value), dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=off)
            off += 4 * size
            out[name] = data.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})")
    return out


def load_into(params: dict, loaded: dict, strict: bool = True) -> None:
    """Copy loaded arrays into parameter tensors by name, validating shapes."""
    if strict:
        missing = set(params) - set(loaded)
        extra = set(loaded) - set(params)
        if missing or extra:
            raise CheckpointError(
                f"parameter names do not match checkpoint (missing={sorted(missing)[:3]}, "
                f"extra={sorted(extra)[:3]})")
    for name, p in params.items():
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
