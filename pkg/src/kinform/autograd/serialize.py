"""KTNS binary tensor format.

Layout (little-endian): magic ``b"KTNS"``, u32 rank, rank x u64 dims,
then ``prod(dims)`` f64 values in row-major order.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"KTNS"


class FormatError(ValueError):
    pass


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def array_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one KTNS blob starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad KTNS magic")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = pos + 8 * count
    if end > len(buf):
        raise FormatError("truncated KTNS payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
    return arr, end


def tensor_from_bytes(buf: bytes) -> Tensor:
    arr, end = array_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after KTNS payload")
    return Tensor(arr)


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
