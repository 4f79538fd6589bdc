"""Binary checkpoint format.

::

    magic    8 bytes  b"DSACKPT\\0"
    version  u32 LE   (1)
    count    u32 LE
    per parameter:
        name_len u16 LE, name utf-8
        ndim     u8, dims u32 LE * ndim
        data     float64 LE, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSACKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode()
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a DSA checkpoint")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * size
    return out


def load_into(model, path) -> None:
    """Copy checkpoint values into ``model.params`` in place."""
    loaded = load_checkpoint(path)
    missing = set(model.params) - set(loaded)
    extra = set(loaded) - set(model.params)
    if missing or extra:
        raise CheckpointError(f"{path}: parameter names differ (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, arr in model.params.items():
        if loaded[name].shape != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {loaded[name].shape}, model expects {arr.shape}")
        arr[...] = loaded[name]
