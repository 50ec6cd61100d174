"""Little-endian binary tensor records.

Layout: magic ``b"GMVT"``, version u32, rank u32, dims u32 x rank, dtype code
u8, then the flat data in C order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"GMVT"
VERSION = 1

# 2 = u8 is an extension used for stored images
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


class TensorFormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    code = {("f", 4): 0, ("f", 8): 1, ("u", 1): 2}.get(key)
    if code is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    dt = DTYPE_CODES[code]
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", code)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def read_from(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    raw = fh.read(8)
    if len(raw) != 8:
        raise TensorFormatError("truncated header")
    version, rank = struct.unpack("<II", raw)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    (code,) = struct.unpack("<B", fh.read(1))
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dt = DTYPE_CODES[code]
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(count * dt.itemsize)
    if len(payload) != count * dt.itemsize:
        raise TensorFormatError("truncated payload")
    return np.frombuffer(payload, dtype=dt).reshape(dims).copy()


def decode(blob: bytes) -> np.ndarray:
    return read_from(io.BytesIO(blob))


def save(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_from(fh)
