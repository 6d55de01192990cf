"""Dense-array helpers and the NDT1 raw tensor file format.

Arrays are plain row-major contiguous numpy ndarrays in float32 or float64.
NDT1 is the on-disk format used for checkpoints and test fixtures:

    magic  b"NDT1"
    rank   u8
    shape  rank x u32 little-endian extents
    dtype  u8 tag (0 = f32, 1 = f64)
    data   payload, little-endian, row-major
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"NDT1"

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class NdError(ValueError):
    """Numeric-substrate error (bad dtype, non-finite data, malformed file)."""


class ShapeError(NdError):
    """Array shapes are incompatible for the requested operation."""


def require_finite(arr: np.ndarray, context: str) -> np.ndarray:
    """Raise NdError if arr contains NaN or Inf; otherwise return it."""
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.isfinite(arr).sum())
        raise NdError(f"{context}: {bad} non-finite value(s)")
    return arr


def _check_dtype(arr: np.ndarray) -> np.dtype:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if np.dtype(dt) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise NdError(f"unsupported dtype {arr.dtype} (only f32/f64)")
    return np.dtype(dt)


def write_ndt(fh: BinaryIO, arr: np.ndarray) -> None:
    """Write one NDT1 record to an open binary stream."""
    arr = np.ascontiguousarray(arr)
    dt = _check_dtype(arr)
    tag = 0 if dt == np.float32 else 1
    if arr.ndim > 255:
        raise NdError(f"rank {arr.ndim} exceeds NDT1 limit of 255")
    fh.write(MAGIC)
    fh.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        if not 0 < extent < 2**32:
            raise NdError(f"extent {extent} out of u32 range")
        fh.write(struct.pack("<I", extent))
    fh.write(struct.pack("<B", tag))
    fh.write(arr.astype(_TAG_TO_DTYPE[tag], copy=False).tobytes(order="C"))


def read_ndt(fh: BinaryIO) -> np.ndarray:
    """Read one NDT1 record from an open binary stream."""
    magic = fh.read(4)
    if magic != MAGIC:
        raise NdError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(
        struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank)
    )
    (tag,) = struct.unpack("<B", _read_exact(fh, 1))
    if tag not in _TAG_TO_DTYPE:
        raise NdError(f"unknown dtype tag {tag}")
    dt = _TAG_TO_DTYPE[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, count * dt.itemsize)
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    # native byte order, own the memory
    return arr.astype(dt.newbyteorder("="), copy=True)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise NdError(f"truncated NDT1 record: wanted {n} bytes, got {len(data)}")
    return data


def save_ndt(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_ndt(fh, arr)


def load_ndt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_ndt(fh)
