"""Binary tensor files.

Layout (all little-endian)::

    b"MSTN" | u32 version=1 | u8 dtype | u8 rank | rank x u64 dims | payload

dtype 0 is 32-bit float, the only dtype in use. The payload is row-major.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError

MAGIC = b"MSTN"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
_DTYPE_CODES = {v: k for k, v in DTYPES.items()}
_HEADER = struct.Struct("<4sIBB")


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    dtype = np.dtype("<f4")
    if arr.dtype != dtype:
        if not np.can_cast(arr.dtype, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}")
        arr = arr.astype(dtype)
    if arr.ndim > 255:
        raise ValueError("rank too large")
    header = _HEADER.pack(MAGIC, VERSION, _DTYPE_CODES[dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + np.ascontiguousarray(arr).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise CorruptFileError("tensor file shorter than its header")
    magic, version, code, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptFileError(f"bad tensor magic {magic!r}")
    if version != VERSION:
        raise CorruptFileError(f"unsupported tensor version {version}")
    if code not in DTYPES:
        raise CorruptFileError(f"unknown dtype code {code}")
    off = _HEADER.size
    if len(buf) < off + 8 * rank:
        raise CorruptFileError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=object)) * dtype.itemsize
    if len(buf) - off != expected:
        raise CorruptFileError(
            f"tensor payload is {len(buf) - off} bytes, expected {expected}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(dims).copy()


def write_tensor(path, arr) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensor(arr))
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
