"""Minimal binary raster container for images, masks, and depth maps.

Layout (all integers little-endian):

    bytes 0-5   magic ``NBRAS1``
    byte  6     dtype code: 1 = uint8, 2 = float32 (little-endian)
    byte  7     number of channels (1 or 3)
    bytes 8-11  height (uint32)
    bytes 12-15 width (uint32)
    bytes 16-   row-major sample data, channel-interleaved

8-bit RGB renders use (uint8, 3); masks (uint8, 1); depth maps (float32, 1).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["write_raster", "read_raster", "RasterFormatError", "MAGIC"]

MAGIC = b"NBRAS1"
_DTYPES = {1: np.dtype("uint8"), 2: np.dtype("<f4")}
_CODES = {v: k for k, v in _DTYPES.items()}


class RasterFormatError(ValueError):
    """Raised for malformed raster files."""


def write_raster(path, array) -> None:
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3 or array.shape[2] not in (1, 3):
        raise RasterFormatError(f"expected HxW or HxWx{{1,3}} array, got shape {array.shape}")
    if array.dtype == np.uint8:
        code = 1
    elif array.dtype in (np.float32, np.dtype("<f4")):
        code = 2
        array = array.astype("<f4", copy=False)
    else:
        raise RasterFormatError(f"unsupported dtype {array.dtype}; use uint8 or float32")
    h, w, c = array.shape
    header = MAGIC + struct.pack("<BBII", code, c, h, w)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(array).tobytes())


def read_raster(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:6] != MAGIC:
        raise RasterFormatError(f"{path}: not a raster file (bad magic)")
    code, channels, h, w = struct.unpack("<BBII", data[6:16])
    if code not in _DTYPES:
        raise RasterFormatError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    expected = 16 + h * w * channels * dtype.itemsize
    if len(data) != expected:
        raise RasterFormatError(f"{path}: size {len(data)} != expected {expected}")
    arr = np.frombuffer(data[16:], dtype=dtype).reshape(h, w, channels)
    if channels == 1:
        arr = arr[:, :, 0]
    return arr.copy()
