"""IRDT binary tensor files.

Layout::

    b"IRDT" | u8 version=1 | u8 dtype (0=f64, 1=f32) | u8 ndim
    | ndim x u32 little-endian extents | row-major little-endian payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .kernel import Tensor

MAGIC = b"IRDT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {"f64": 0, "f32": 1}


class IRDTError(ValueError):
    pass


def encode(t, dtype: str = "f64") -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if dtype not in _CODES:
        raise IRDTError(f"unknown dtype {dtype!r}; expected 'f64' or 'f32'")
    if arr.ndim > 255:
        raise IRDTError(f"too many axes: {arr.ndim}")
    code = _CODES[dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(order="C")
    return header + payload


def decode(buf: bytes) -> Tensor:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise IRDTError("not an IRDT buffer (bad magic)")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise IRDTError(f"unsupported IRDT version {version}")
    if code not in _DTYPES:
        raise IRDTError(f"unknown dtype code {code}")
    offset = 7 + 4 * ndim
    if len(buf) < offset:
        raise IRDTError("truncated IRDT header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 7)
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != offset + count * dt.itemsize:
        raise IRDTError(f"payload size mismatch for shape {shape}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(shape)
    return Tensor(arr.astype(np.float64))


def write(path, t, dtype: str = "f64") -> None:
    path = Path(path)
    try:
        path.write_bytes(encode(t, dtype))
    except OSError as exc:
        raise OSError(f"cannot write IRDT file {path}: {exc}") from exc


def read(path) -> Tensor:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read IRDT file {path}: {exc}") from exc
    try:
        return decode(buf)
    except IRDTError as exc:
        raise IRDTError(f"{path}: {exc}") from exc
