"""Binary tensor container used for datasets and checkpoints.

Layout: magic ``PTNS``, version u32, dtype code u8 (0 = float32), ndim u8,
then one u64 per dimension, then the row-major little-endian payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"PTNS"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4")}
_CODE_FOR_DTYPE = {np.dtype("<f4"): 0}


class TensorFormatError(ValueError):
    """Raised when a tensor file cannot be decoded."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind  # "bad_magic" | "bad_dtype" | "truncated" | "bad_version"


def write_tensor(path, tensor: np.ndarray) -> None:
    """Write ``tensor`` to ``path`` atomically (temp file + rename)."""
    arr = np.asarray(tensor, dtype=np.float32)
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    code = _CODE_FOR_DTYPE[np.dtype("<f4")]
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    dims = struct.pack("<" + "Q" * arr.ndim, *arr.shape)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(dims)
        f.write(arr.astype("<f4", copy=False).tobytes())
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise TensorFormatError("bad_magic", f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 10:
        raise TensorFormatError("truncated", f"{path}: truncated header")
    version, code, ndim = struct.unpack("<IBB", raw[4:10])
    if version != VERSION:
        raise TensorFormatError("bad_version", f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise TensorFormatError("bad_dtype", f"{path}: unsupported dtype code {code}")
    off = 10
    if len(raw) < off + 8 * ndim:
        raise TensorFormatError("truncated", f"{path}: truncated dims")
    shape = struct.unpack("<" + "Q" * ndim, raw[off : off + 8 * ndim]) if ndim else ()
    off += 8 * ndim
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = raw[off:]
    if len(payload) != count * dtype.itemsize:
        raise TensorFormatError(
            "truncated", f"{path}: payload {len(payload)}B, expected {count * dtype.itemsize}B"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
