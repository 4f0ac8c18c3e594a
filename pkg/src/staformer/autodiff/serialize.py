"""Binary tensor files.

Layout: magic ``b"STAT"``, u8 dtype code (0 = f32, 1 = f64), u8 rank,
rank x u32 little-endian extents, then the raw little-endian values in
row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from ..errors import ValidationError

MAGIC = b"STAT"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def tensor_to_bytes(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    if arr.dtype not in _CODES:
        raise ValidationError(f"unsupported dtype {arr.dtype}; only float32/float64")
    if arr.ndim > 255:
        raise ValidationError("rank too large")
    header = MAGIC + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    return _read(io.BytesIO(buf))


def _read(fh: BinaryIO) -> np.ndarray:
    if fh.read(4) != MAGIC:
        raise ValidationError("not a STAT tensor file (bad magic)")
    head = fh.read(2)
    if len(head) != 2:
        raise ValidationError("truncated STAT header")
    code, rank = struct.unpack("<BB", head)
    if code not in _DTYPES:
        raise ValidationError(f"unknown dtype code {code}")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise ValidationError("truncated STAT extents")
    shape = struct.unpack(f"<{rank}I", raw)
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ValidationError("truncated STAT payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path: Union[str, Path], array) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as fh:
        return _read(fh)
