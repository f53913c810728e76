"""Shared domain types, a bit-exact binary tensor format, and seeded RNG streams.

All in-memory computation runs in float64; tensors are rounded to float32
only when written to disk.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

TENSOR_MAGIC = b"SPLT"
TENSOR_VERSION = 1
TENSOR_DTYPE_F32 = 1

_HEADER_FIXED = struct.Struct("<4sII")  # magic, version, ndim


class TensorFormatError(ValueError):
    """Malformed tensor file (bad magic, version, dtype, or truncated payload)."""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its preconditions."""


@dataclass(frozen=True)
class MaterialImage:
    """Stack of per-material density maps, shape (M, H, W), water-equivalent units."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ContractViolation(f"material image must be 3-d (M,H,W), got {arr.shape}")
        m, h, w = arr.shape
        if m < 1 or h < 2 or w < 2:
            raise ContractViolation(f"material image shape out of range: {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("material image contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def materials(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class SpectralSinogram:
    """Normalized intensities over (angle, detector, energy bin), shape (P1, P2, B)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ContractViolation(f"sinogram must be 3-d (P1,P2,B), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("sinogram contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def n_angles(self) -> int:
        return self.data.shape[0]

    @property
    def n_dets(self) -> int:
        return self.data.shape[1]

    @property
    def n_bins(self) -> int:
        return self.data.shape[2]


def write_tensor(path, values: np.ndarray) -> None:
    """Write an array to `path` in the SPLT binary layout (float32, little-endian).

    Layout: magic "SPLT", u32 version=1, u32 ndim, ndim x u32 dims,
    u32 dtype tag (1 = float32), then the row-major float32 payload.
    """
    arr = np.asarray(values)
    if arr.ndim == 0:
        raise ContractViolation("tensor must have at least one dimension")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation("refusing to write non-finite values")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    header = _HEADER_FIXED.pack(TENSOR_MAGIC, TENSOR_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    dtype_tag = struct.pack("<I", TENSOR_DTYPE_F32)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(dtype_tag)
        fh.write(payload.tobytes())


def read_tensor(path):
    """Read a SPLT tensor file; returns (shape tuple, float32 ndarray).

    Inverse of :func:`write_tensor`; raises TensorFormatError naming the
    offending field on malformed input.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER_FIXED.size:
        raise TensorFormatError(f"{path}: truncated header")
    magic, version, ndim = _HEADER_FIXED.unpack_from(raw, 0)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"{path}: bad version {version}")
    offset = _HEADER_FIXED.size
    if len(raw) < offset + 4 * ndim + 4:
        raise TensorFormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", raw, offset)
    offset += 4 * ndim
    (dtype_tag,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if dtype_tag != TENSOR_DTYPE_F32:
        raise TensorFormatError(f"{path}: bad dtype tag {dtype_tag}")
    count = int(np.prod(dims)) if dims else 0
    expected = count * 4
    if len(raw) - offset != expected:
        raise TensorFormatError(
            f"{path}: truncated payload (expected {expected} bytes, got {len(raw) - offset})"
        )
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return tuple(dims), values.reshape(dims).copy()


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream.

    The (seed, label) pair fully determines the value sequence: the pair is
    hashed to a Philox key, so streams with different labels are statistically
    independent and identical pairs reproduce bit-identical draws on any
    platform.
    """

    seed: int
    label: str

    def generator(self) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed:d}:{self.label}".encode()).digest()
        key = np.frombuffer(digest[:16], dtype="<u8")
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, sublabel: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{sublabel}")
