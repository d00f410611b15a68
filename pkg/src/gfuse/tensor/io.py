"""Portable tensor files.

Layout: the 8-byte magic ``GFTENSR1``, a little-endian u32 rank, ``rank``
little-endian u32 dimensions, then the float64 payload (little-endian,
row-major).
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .core import Tensor

MAGIC = b"GFTENSR1"


class TensorFileError(ValueError):
    pass


def dumps(value) -> bytes:
    arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:8] != MAGIC:
        raise TensorFileError("bad magic: not a GFTENSR1 tensor file")
    (rank,) = struct.unpack_from("<I", buf, 8)
    end = 12 + 4 * rank
    if len(buf) < end:
        raise TensorFileError(f"truncated header: need {end} bytes, have {len(buf)}")
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != end + 8 * count:
        raise TensorFileError(f"payload size {len(buf) - end} does not match shape {shape}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=end).astype(np.float64).reshape(shape)


def save_tensor(path: str | os.PathLike, value) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(value))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
