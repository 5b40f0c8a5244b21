"""VVOL volume files.

Little-endian layout::

    0   4 bytes  magic b"VVOL"
    4   u32      version (1)
    8   u8       dtype: 0 = float32 intensity, 1 = uint8 label
    9   u32 x 3  D, H, W
    21  payload  D*H*W elements, row-major (D slowest)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VVOL"
VERSION = 1
HEADER_SIZE = 21
MAX_ELEMENTS = 2**31 - 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimensionOverflowError(VolumeFormatError):
    pass


def encode_volume(array: np.ndarray) -> bytes:
    if array.ndim != 3:
        raise ValueError(f"VVOL stores 3-D arrays, got shape {array.shape}")
    if array.dtype == np.uint8 or array.dtype == np.bool_:
        code, payload = 1, np.ascontiguousarray(array, dtype="u1")
    elif np.issubdtype(array.dtype, np.floating):
        code, payload = 0, np.ascontiguousarray(array, dtype="<f4")
    else:
        raise ValueError(f"unsupported dtype {array.dtype}")
    return MAGIC + struct.pack("<IB3I", VERSION, code, *array.shape) + payload.tobytes()


def decode_volume(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r} at offset 0, expected {MAGIC!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedPayloadError(f"header truncated: {len(buf)} of {HEADER_SIZE} bytes")
    version, code, d, h, w = struct.unpack_from("<IB3I", buf, 4)
    if version != VERSION:
        raise VolumeFormatError(f"unsupported version {version} at offset 4")
    if code not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype code {code} at offset 8")
    count = d * h * w
    if count > MAX_ELEMENTS:
        raise DimensionOverflowError(f"dimensions {d}x{h}x{w} at offset 9 exceed {MAX_ELEMENTS} elements")
    dtype = _DTYPES[code]
    expected = HEADER_SIZE + count * dtype.itemsize
    if len(buf) < expected:
        raise TruncatedPayloadError(f"payload truncated at offset {len(buf)}: expected {expected} bytes")
    if len(buf) > expected:
        raise VolumeFormatError(f"{len(buf) - expected} trailing bytes after offset {expected}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=HEADER_SIZE).reshape(d, h, w)
    return arr.astype(np.float32 if code == 0 else np.uint8)


def write_volume(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_volume(array))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())
