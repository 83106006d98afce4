"""PTNSR tensor files.

Layout (all integers little-endian)::

    b"PTNSR1\\n"            7-byte magic
    u32 rank
    u32 extent * rank
    f32 payload, row-major, prod(extents) values
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"PTNSR1\n"


class PTNSRFormatError(ValueError):
    pass


def dumps(arr) -> bytes:
    a = np.asarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if not buf.startswith(MAGIC):
        raise PTNSRFormatError("missing PTNSR1 magic")
    off = len(MAGIC)
    if len(buf) < off + 4:
        raise PTNSRFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) < off + 4 * rank:
        raise PTNSRFormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise PTNSRFormatError(f"payload holds {(len(buf) - off) // 4} values, header says {count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)


def save(path: str | os.PathLike, arr) -> None:
    with open(path, "wb") as f:
        f.write(dumps(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return loads(f.read())
