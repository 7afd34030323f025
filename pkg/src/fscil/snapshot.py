"""Checkpoint container for named float64 arrays.

Layout (little-endian)::

    b"FSW1", u32 record count
    per record: u16 id length, id (utf-8), u8 ndim, ndim x u32 dims, raw f64 values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FSW1"


def to_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def from_bytes(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated snapshot", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = take(klen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise FormatError("trailing bytes after last record", pos)
    return arrays


def save(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(to_bytes(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return from_bytes(Path(path).read_bytes())
