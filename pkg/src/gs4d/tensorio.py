"""Binary tensor sidecar format (G4DT).

Layout, all little-endian:
    bytes 0..3   magic b"G4DT"
    bytes 4..7   u32 ndim
    next 4*ndim  u32 dims[]
    rest         float32 payload, C order
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"G4DT"


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write an array as a G4DT file (stored as float32)."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a G4DT file, returning a float32 array."""
    with open(path, "rb") as f:
        data = f.read()
    return tensor_from_bytes(data, name=str(path))


def tensor_from_bytes(data: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise DataError(f"{name}: missing G4DT magic")
    (ndim,) = struct.unpack_from("<I", data, 4)
    header_end = 8 + 4 * ndim
    if len(data) < header_end:
        raise DataError(f"{name}: truncated G4DT header (ndim={ndim})")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    count = int(np.prod(dims)) if ndim > 0 else 1
    expected = header_end + 4 * count
    if len(data) != expected:
        raise DataError(
            f"{name}: G4DT payload size mismatch, expected {expected} bytes got {len(data)}"
        )
    arr = np.frombuffer(data, dtype="<f4", offset=header_end, count=count)
    return arr.reshape(dims).copy()


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    out = [MAGIC, struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape)]
    out.append(arr.tobytes(order="C"))
    return b"".join(out)
