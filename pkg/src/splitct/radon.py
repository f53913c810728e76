"""Discrete parallel-beam Radon transform with a matched adjoint.

The projector follows Joseph's method: each ray takes unit steps along its
dominant axis and linearly interpolates the image perpendicular to it. The
full linear map is assembled once per geometry as a sparse matrix, so the
backprojector is the exact transpose and the adjoint identity holds to
machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .core import ContractViolation, MaterialImage


def default_detector_count(size: int) -> int:
    """Smallest odd detector count covering the image diagonal."""
    n = math.ceil(size * math.sqrt(2.0))
    return n if n % 2 == 1 else n + 1


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam geometry: H=W image, unit pixel pitch, centered detector."""

    size: int
    angles: np.ndarray
    n_dets: int

    def __post_init__(self):
        ang = np.ascontiguousarray(self.angles, dtype=np.float64)
        if ang.ndim != 1 or ang.size < 1:
            raise ContractViolation("angles must be a non-empty 1-d array")
        if np.any(np.diff(ang) <= 0):
            raise ContractViolation("angles must be strictly increasing")
        if ang[0] < 0 or ang[-1] >= np.pi:
            raise ContractViolation("angles must lie in [0, pi)")
        if self.n_dets < math.ceil(self.size * math.sqrt(2.0)):
            raise ContractViolation(
                f"n_dets={self.n_dets} does not cover the diagonal of size={self.size}"
            )
        object.__setattr__(self, "angles", ang)

    @property
    def n_angles(self) -> int:
        return self.angles.size

    def cache_key(self):
        return (self.size, self.n_dets, self.angles.tobytes())


def make_geometry(size: int, n_angles: int, n_dets: int | None = None) -> Geometry:
    """Uniform angles in [0, pi) and the default centered detector array."""
    angles = np.arange(n_angles, dtype=np.float64) * (np.pi / n_angles)
    if n_dets is None:
        n_dets = default_detector_count(size)
    return Geometry(size=size, angles=angles, n_dets=n_dets)


def restrict_geometry(geom: Geometry, angle_indices) -> Geometry:
    """Geometry keeping only the selected angles; projection on it equals
    row-selection of the full projection."""
    idx = np.asarray(angle_indices, dtype=np.int64)
    if idx.size == 0:
        raise ContractViolation("angle index list must be non-empty")
    if np.any(np.diff(idx) <= 0):
        raise ContractViolation("angle indices must be strictly increasing")
    if idx[0] < 0 or idx[-1] >= geom.n_angles:
        raise ContractViolation("angle index out of range")
    return Geometry(size=geom.size, angles=geom.angles[idx], n_dets=geom.n_dets)


def _joseph_rows(size: int, n_dets: int, theta: float, angle_index: int):
    """COO entries for all rays at one angle; fixed entry order per ray."""
    h = w = size
    half = (size - 1) / 2.0
    det_half = (n_dets - 1) / 2.0
    c, s = math.cos(theta), math.sin(theta)
    offsets = np.arange(n_dets, dtype=np.float64) - det_half

    rows_out = []
    cols_out = []
    vals_out = []
    if abs(s) >= abs(c):
        # step over columns, interpolate across rows
        inv = 1.0 / abs(s)
        xs = np.arange(w, dtype=np.float64) - half
        # ray (d): y(x) = (offset_d - x cos) / sin
        yy = (offsets[:, None] - xs[None, :] * c) / s  # (n_dets, w)
        rf = yy + half
        r0 = np.floor(rf).astype(np.int64)
        frac = rf - r0
        det_idx, col_idx = np.meshgrid(
            np.arange(n_dets, dtype=np.int64), np.arange(w, dtype=np.int64), indexing="ij"
        )
        for r_base, weight in ((r0, (1.0 - frac) * inv), (r0 + 1, frac * inv)):
            ok = (r_base >= 0) & (r_base < h) & (weight > 0)
            rows_out.append((angle_index * n_dets + det_idx[ok]))
            cols_out.append(r_base[ok] * w + col_idx[ok])
            vals_out.append(weight[ok])
    else:
        # step over rows, interpolate across columns
        inv = 1.0 / abs(c)
        ys = np.arange(h, dtype=np.float64) - half
        xx = (offsets[:, None] - ys[None, :] * s) / c  # (n_dets, h)
        cf = xx + half
        c0 = np.floor(cf).astype(np.int64)
        frac = cf - c0
        det_idx, row_idx = np.meshgrid(
            np.arange(n_dets, dtype=np.int64), np.arange(h, dtype=np.int64), indexing="ij"
        )
        for c_base, weight in ((c0, (1.0 - frac) * inv), (c0 + 1, frac * inv)):
            ok = (c_base >= 0) & (c_base < w) & (weight > 0)
            rows_out.append((angle_index * n_dets + det_idx[ok]))
            cols_out.append(row_idx[ok] * w + c_base[ok])
            vals_out.append(weight[ok])
    return rows_out, cols_out, vals_out


_MATRIX_CACHE: dict = {}


def system_matrix(geom: Geometry) -> sparse.csr_matrix:
    """Sparse Joseph projection matrix, (P1*P2) x (H*W); cached per geometry."""
    key = geom.cache_key()
    cached = _MATRIX_CACHE.get(key)
    if cached is not None:
        return cached[0]
    rows, cols, vals = [], [], []
    for a, theta in enumerate(geom.angles):
        r, c, v = _joseph_rows(geom.size, geom.n_dets, float(theta), a)
        rows.extend(r)
        cols.extend(c)
        vals.extend(v)
    mat = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_angles * geom.n_dets, geom.size * geom.size),
    )
    mat.sum_duplicates()
    mat_t = mat.T.tocsr()
    _MATRIX_CACHE[key] = (mat, mat_t)
    return mat


def _system_matrix_t(geom: Geometry) -> sparse.csr_matrix:
    system_matrix(geom)
    return _MATRIX_CACHE[geom.cache_key()][1]


def project(geom: Geometry, img: np.ndarray) -> np.ndarray:
    """Line integrals of a single-channel image; output shape (P1, P2)."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (geom.size, geom.size):
        raise ContractViolation(f"image shape {img.shape} does not match geometry")
    sino = system_matrix(geom) @ img.ravel()
    return sino.reshape(geom.n_angles, geom.n_dets)


def backproject(geom: Geometry, sino: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`project` (transpose of the same sparse map)."""
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != (geom.n_angles, geom.n_dets):
        raise ContractViolation(f"sinogram shape {sino.shape} does not match geometry")
    img = _system_matrix_t(geom) @ sino.ravel()
    return img.reshape(geom.size, geom.size)


def project_stack(geom: Geometry, img) -> np.ndarray:
    """Channel-wise projection of an (M, H, W) stack; output (P1, P2, M)."""
    data = img.data if isinstance(img, MaterialImage) else np.asarray(img, dtype=np.float64)
    if data.ndim != 3 or data.shape[1:] != (geom.size, geom.size):
        raise ContractViolation(f"stack shape {data.shape} does not match geometry")
    m = data.shape[0]
    flat = data.reshape(m, -1).T  # (N, M)
    sino = system_matrix(geom) @ flat
    return np.ascontiguousarray(sino.reshape(geom.n_angles, geom.n_dets, m))


def backproject_stack(geom: Geometry, sino: np.ndarray) -> np.ndarray:
    """Channel-wise adjoint of :func:`project_stack`; output (M, H, W)."""
    sino = np.asarray(sino, dtype=np.float64)
    if sino.ndim != 3 or sino.shape[:2] != (geom.n_angles, geom.n_dets):
        raise ContractViolation(f"sinogram stack shape {sino.shape} does not match geometry")
    m = sino.shape[2]
    flat = sino.reshape(-1, m)
    img = _system_matrix_t(geom) @ flat
    return np.ascontiguousarray(img.T.reshape(m, geom.size, geom.size))
