"""SPTN v1 tensor files.

Layout (little-endian): magic ``SPTN``; u32 version (1); u8 dtype code
(0=f32, 1=f64, 2=u8); u8 ndim; two zero pad bytes; ndim u64 extents;
row-major payload.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPTN"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {code: dt for dt, code in _CODES.items()}


class SPTNError(ValueError):
    pass


def to_bytes(array) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in _CODES:
        raise SPTNError(f"unsupported dtype {arr.dtype}")
    # ascontiguousarray would promote a scalar to shape (1,)
    arr = np.ascontiguousarray(arr, dtype=dt).reshape(arr.shape)
    header = MAGIC + struct.pack("<IBBxx", VERSION, _CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise SPTNError("bad magic")
    version, code, ndim = struct.unpack_from("<IBBxx", buf, 4)
    if version != VERSION:
        raise SPTNError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise SPTNError(f"unknown dtype code {code}")
    off = 12 + 8 * ndim
    if len(buf) < off:
        raise SPTNError("truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 12)
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != count * dt.itemsize:
        raise SPTNError("payload size does not match extents")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).copy()


def save(path, array) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(array))
    os.replace(tmp, path)


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
