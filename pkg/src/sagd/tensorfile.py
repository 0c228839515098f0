"""SAGD-TF v1: a minimal binary container for float32 tensors.

Layout::

    b"SAGD" | version u8 = 1 | dtype u8 = 0 (float32) | ndim u8 |
    ndim x little-endian u32 dims | row-major little-endian float32 payload
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SAGD"
VERSION = 1
DTYPE_F32 = 0


class TensorFileError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise TensorFileError("at most 255 dimensions are supported")
    if any(n > 0xFFFFFFFF for n in arr.shape):
        raise TensorFileError("dimension does not fit in 32 bits")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(data: bytes) -> np.ndarray:
    if len(data) < 7 or data[:4] != MAGIC:
        raise TensorFileError("not a SAGD-TF file (bad magic)")
    version, dtype, ndim = struct.unpack_from("<BBB", data, 4)
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFileError(f"unsupported dtype code {dtype}")
    offset = 7 + 4 * ndim
    if len(data) < offset:
        raise TensorFileError("truncated header")
    shape = struct.unpack_from(f"<{ndim}I", data, 7)
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(data) - offset != expected:
        raise TensorFileError(f"payload has {len(data) - offset} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


def write_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(encode(array))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
