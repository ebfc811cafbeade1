"""Writer for the .mmt binary tensor container.

Layout: magic ``MMTN``, then four bytes (version, dtype code, rank,
reserved), then ``rank`` little-endian u64 extents, then the row-major
float32 payload. This mirrors the documented container format of the
matching pipeline; only the writer lives here, readers belong to the
consumer.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMTN"
VERSION = 1
DTYPE_F32 = 1


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim < 1 or any(e == 0 for e in arr.shape):
        raise ValueError("write_tensor: rank >= 1 and positive extents required")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BBBB", VERSION, DTYPE_F32, arr.ndim, 0))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())
