"""Writer/reader for the AVFX feature-file format.

Byte layout (all little-endian): bytes 0-3 magic "AVFX"; bytes 4-7 version=1
(u32); bytes 8-11 reserved=0; bytes 12-15 T (u32); bytes 16-19 D (u32);
then T*D IEEE-754 float32 values, frame-major.
"""
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"AVFX"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class AvfxError(ValueError):
    pass


def write_avfx(data, path) -> None:
    """Write a T x D float32 array; partial files are never left behind."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise AvfxError(f"expected a T x D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise AvfxError("refusing to write non-finite feature values")
    t, d = arr.shape
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, 0, t, d))
            fh.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_avfx(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise AvfxError(f"{path}: truncated header")
        magic, version, _reserved, t, d = _HEADER.unpack(header)
        if magic != MAGIC:
            raise AvfxError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise AvfxError(f"{path}: unsupported version {version}")
        if t < 1 or d < 1:
            raise AvfxError(f"{path}: invalid dims T={t}, D={d}")
        payload = fh.read(t * d * 4)
    if len(payload) < t * d * 4:
        raise AvfxError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d).copy()
