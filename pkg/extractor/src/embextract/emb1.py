"""Writer for the EMB1 dump format consumed by the fusion toolkit.

Layout (little-endian): magic ``EMB1``, u32 version = 1, u32 T, u32 d,
then T*d float32 values in row-major order.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_emb1(frames: np.ndarray, path) -> None:
    frames = np.ascontiguousarray(frames, dtype=np.float32)
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
        raise ValueError(f"frames must be a non-empty 2-D matrix, got shape {frames.shape}")
    if not np.isfinite(frames).all():
        raise ValueError("frames must be finite")
    t, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, t, d))
        fh.write(frames.astype("<f4", copy=False).tobytes())


def read_emb1_header(path) -> tuple[int, int]:
    """(T, d) from an EMB1 header, without loading the payload."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: shorter than an EMB1 header")
    magic, version, t, d = _HEADER.unpack(raw)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path}: not an EMB1 v1 file")
    return t, d
