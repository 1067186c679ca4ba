"""STK1 tensor container: a minimal binary format for dense float64 arrays.

Layout: magic ``STK1`` | u8 version (1) | u8 dtype code (1 = float64
little-endian) | u8 ndim | ndim x u64 little-endian extents | row-major
payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError

MAGIC = b"STK1"
VERSION = 1
DTYPE_F64_LE = 1


def write_tensor(path, array) -> None:
    """Write ``array`` (coerced to float64) to ``path`` in STK1 format."""
    arr = np.asarray(array, dtype="<f8")
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.copy(arr, order="C")  # keeps 0-d arrays 0-d
    if arr.ndim > 255:
        raise FormatError(f"ndim {arr.ndim} exceeds the u8 header field")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F64_LE, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an STK1 file back into a float64 ndarray."""
    raw = Path(path).read_bytes()
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not an STK1 container")
    version, dtype_code, ndim = struct.unpack("<BBB", raw[4:7])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_F64_LE:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    offset = 7 + 8 * ndim
    if len(raw) < offset:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack(f"<{ndim}Q", raw[7:offset]) if ndim else ()
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = raw[offset:]
    if len(payload) != 8 * count:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, expected {8 * count}"
        )
    data = np.frombuffer(payload, dtype="<f8", count=count)
    return data.reshape(shape).astype(np.float64, copy=True)
