"""Binary container for named float32 tensors.

Layout (all integers little-endian)::

    b"MFFA" | u32 version | u32 count |
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u64 extent | float32 values )
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MFFA"
FORMAT_VERSION = 1
_VALUE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=_VALUE).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic; not an MFFA checkpoint")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"tensor {name!r} truncated")
            out[name] = np.frombuffer(buf, dtype=_VALUE, count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def bytes_to_tensor(raw: bytes) -> np.ndarray:
    """Store opaque bytes (config text, hashes) as one float32 per byte."""
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    return np.asarray(arr).astype(np.uint8).tobytes()
