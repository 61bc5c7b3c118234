"""Core data types and the binary feature/label file formats.

Two fixed little-endian formats:

* ``CFF1`` feature files: magic ``CFF1``, u32 version=1, u64 n, u32 d,
  u8 l2_flag, 3 reserved zero bytes, then n*d float32 values row-major.
* ``CFL1`` label files: magic ``CFL1``, u32 version=1, u64 n,
  u32 num_classes, then n u32 labels.

Fixed headers make truncation detectable and parsing trivial from any
language.  In-memory arrays are float64 so downstream accumulations
(means, inertia, losses) run at 64-bit precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateInputError,
    FormatError,
    ShapeError,
    TruncationError,
    ValidationError,
)

FEATURE_MAGIC = b"CFF1"
LABEL_MAGIC = b"CFL1"
_FEATURE_HEADER = struct.Struct("<4sIQIB3x")  # magic, version, n, d, l2_flag, pad
_LABEL_HEADER = struct.Struct("<4sIQI")  # magic, version, n, num_classes


def _as_float2d(data, name="data") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """n x d dense real matrix of embeddings. Immutable once built."""

    data: np.ndarray
    l2_normalized: bool = False

    def __post_init__(self):
        arr = _as_float2d(self.data, "features")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        if self.l2_normalized:
            norms = np.linalg.norm(arr, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-4):
                raise ValidationError(
                    "l2_normalized flag set but row norms deviate from 1 by more than 1e-4"
                )

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class LabelVector:
    """Per-sample categorical labels in [0, num_classes)."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=np.int64)
        if arr.ndim != 1:
            raise ShapeError(f"labels must be 1-dimensional, got shape {arr.shape}")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}), "
                f"found range [{arr.min()}, {arr.max()}]"
            )
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class Centroids:
    """k x d cluster centers plus fit metadata."""

    centers: np.ndarray
    inertia: float
    iterations_run: int

    def __post_init__(self):
        arr = _as_float2d(self.centers, "centers")
        arr.setflags(write=False)
        object.__setattr__(self, "centers", arr)
        if self.k < 1:
            raise ValidationError("need at least one center")
        if self.inertia < 0:
            raise ValidationError("inertia must be non-negative")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True, eq=False)
class Dataset:
    """A feature matrix with optional labels and a role tag.

    Roles: ``pretrain`` (source supervision), ``clusterfit`` (re-labeling
    pool), ``target`` (transfer evaluation).
    """

    features: FeatureMatrix
    labels: LabelVector | None = None
    role: str = "clusterfit"
    _ROLES = ("pretrain", "clusterfit", "target")

    def __post_init__(self):
        if self.role not in self._ROLES:
            raise ValidationError(f"role must be one of {self._ROLES}, got {self.role!r}")
        if self.labels is not None and self.labels.n != self.features.n:
            raise ShapeError(
                f"labels have {self.labels.n} entries but features have {self.features.n} rows"
            )


def write_features(m: FeatureMatrix, path) -> None:
    """Write a FeatureMatrix in CFF1 format (float32, little-endian)."""
    payload = np.ascontiguousarray(m.data, dtype="<f4")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, 1, m.n, m.d, int(m.l2_normalized))
    Path(path).write_bytes(header + payload.tobytes())


def read_features(path) -> FeatureMatrix:
    """Read and validate a CFF1 feature file."""
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise TruncationError(f"{path}: file shorter than the CFF1 header")
    magic, version, n, d, l2_flag = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported CFF1 version {version}")
    expected = _FEATURE_HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise TruncationError(
            f"{path}: header declares {n}x{d} floats ({expected} bytes) "
            f"but file has {len(raw)} bytes"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(n, d)
    if not np.isfinite(data).all():
        raise ValidationError(f"{path}: payload contains non-finite values")
    return FeatureMatrix(data.astype(np.float64), l2_normalized=bool(l2_flag))


def write_labels(v: LabelVector, path) -> None:
    """Write a LabelVector in CFL1 format (u32, little-endian)."""
    payload = np.ascontiguousarray(v.labels, dtype="<u4")
    header = _LABEL_HEADER.pack(LABEL_MAGIC, 1, v.n, v.num_classes)
    Path(path).write_bytes(header + payload.tobytes())


def read_labels(path) -> LabelVector:
    """Read and validate a CFL1 label file."""
    raw = Path(path).read_bytes()
    if len(raw) < _LABEL_HEADER.size:
        raise TruncationError(f"{path}: file shorter than the CFL1 header")
    magic, version, n, num_classes = _LABEL_HEADER.unpack_from(raw)
    if magic != LABEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {LABEL_MAGIC!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported CFL1 version {version}")
    expected = _LABEL_HEADER.size + 4 * n
    if len(raw) != expected:
        raise TruncationError(
            f"{path}: header declares {n} labels ({expected} bytes) "
            f"but file has {len(raw)} bytes"
        )
    labels = np.frombuffer(raw, dtype="<u4", offset=_LABEL_HEADER.size)
    return LabelVector(labels.astype(np.int64), num_classes=num_classes)


def l2_normalize(m: FeatureMatrix) -> FeatureMatrix:
    """Scale each row to unit Euclidean norm.

    Idempotent; rejects zero rows by index so the caller can locate the
    offending sample.
    """
    norms = np.linalg.norm(m.data, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateInputError(f"row {zero[0]} has zero norm, cannot normalize")
    return FeatureMatrix(m.data / norms[:, None], l2_normalized=True)
