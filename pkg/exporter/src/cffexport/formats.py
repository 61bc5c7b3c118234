"""Writers for the binary exchange formats the pipeline consumes.

CFF1 (features): magic "CFF1", u32 version=1, u64 n, u32 d,
u8 l2-normalized flag, 3 pad bytes, then n*d float32 little-endian,
row-major.

CFL1 (labels): magic "CFL1", u32 version=1, u64 n, u32 num_classes,
then n u32 labels.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_CFF_HEADER = struct.Struct("<4sIQIB3x")
_CFL_HEADER = struct.Struct("<4sIQI")


def write_cff(path, rows: np.ndarray, l2_normalized: bool = False) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError(f"feature rows must be 2-D, got shape {rows.shape}")
    n, d = rows.shape
    with open(path, "wb") as fh:
        fh.write(_CFF_HEADER.pack(b"CFF1", 1, n, d, int(l2_normalized)))
        fh.write(rows.tobytes())


def write_cfl(path, labels: np.ndarray, num_classes: int) -> None:
    labels = np.ascontiguousarray(labels, dtype="<u4")
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and int(labels.max()) >= num_classes:
        raise ValueError(f"label {int(labels.max())} out of range for "
                         f"num_classes={num_classes}")
    with open(path, "wb") as fh:
        fh.write(_CFL_HEADER.pack(b"CFL1", 1, labels.size, num_classes))
        fh.write(labels.tobytes())


def labels_path_for(out_path) -> Path:
    return Path(out_path).with_suffix(".cfl")


def manifest_path_for(out_path) -> Path:
    return Path(str(out_path) + ".manifest.json")
