"""Little-endian packed containers shared by the on-disk formats.

Every container starts with an 8-byte magic string. Arrays are written with
explicit ``<`` dtypes so files are byte-identical across platforms.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .exceptions import DataError


def write_blob(path, magic: bytes, payload: bytes) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    Path(path).write_bytes(magic + payload)


def read_blob(path, magic: bytes) -> io.BytesIO:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise DataError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    return io.BytesIO(raw[8:])


def pack_u32(x: int) -> bytes:
    return struct.pack("<I", x)


def pack_u64(x: int) -> bytes:
    return struct.pack("<Q", x)


def unpack(fmt: str, buf: io.BytesIO):
    size = struct.calcsize(fmt)
    chunk = buf.read(size)
    if len(chunk) != size:
        raise DataError("truncated file")
    return struct.unpack(fmt, chunk)


def pack_strings(values) -> bytes:
    out = [pack_u32(len(values))]
    for v in values:
        enc = str(v).encode("utf-8")
        out.append(pack_u32(len(enc)))
        out.append(enc)
    return b"".join(out)


def unpack_strings(buf: io.BytesIO) -> list[str]:
    (count,) = unpack("<I", buf)
    values = []
    for _ in range(count):
        (n,) = unpack("<I", buf)
        chunk = buf.read(n)
        if len(chunk) != n:
            raise DataError("truncated string table")
        values.append(chunk.decode("utf-8"))
    return values


def pack_array(a: np.ndarray, dtype: str = "<f8") -> bytes:
    """Shape header (u32 ndim, u64 per dim) then C-order data."""
    a = np.ascontiguousarray(a, dtype=dtype)
    head = pack_u32(a.ndim) + b"".join(pack_u64(s) for s in a.shape)
    return head + a.tobytes()


def unpack_array(buf: io.BytesIO, dtype: str = "<f8") -> np.ndarray:
    (ndim,) = unpack("<I", buf)
    shape = tuple(unpack("<Q", buf)[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * np.dtype(dtype).itemsize
    chunk = buf.read(nbytes)
    if len(chunk) != nbytes:
        raise DataError("truncated array payload")
    return np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
