"""Named float64 array files (little-endian, magic ``MGCK``).

Layout: magic, u32 version, u32 array count, then per array: u16 name
length, UTF-8 name, u8 rank, u64 dims[rank], f64 data in row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MGCK"
VERSION = 1


class ArrayFileError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ArrayFileError(f"array name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ArrayFileError(f"rank {arr.ndim} too large for {name}")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise ArrayFileError("bad magic; not an MGCK file")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", view, pos)
        pos += 8
        if version != VERSION:
            raise ArrayFileError(f"unsupported version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(view):
                raise ArrayFileError(f"truncated array file: {name} needs {size} values")
            data = np.frombuffer(view, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            out[name] = data.astype(np.float64).reshape(dims)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ArrayFileError(f"truncated array file: {exc}") from None
    if pos != len(view):
        raise ArrayFileError(f"{len(view) - pos} trailing bytes")
    return out


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def encode_text(text: str) -> np.ndarray:
    """Store a UTF-8 string as a rank-1 array of byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.float64).astype(np.uint8).tolist()).decode("utf-8")
