"""Partitions of the measurement index set (angle x detector x bin).

Each subset is an axis-aligned slice described by (axis, parity): parity is
positional over the 1-based index range, so "odd" selects 0-based indices
0, 2, 4, ... Subsets restrict and scatter data in canonical angle-major
order, and partitions always cover the index set exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ContractViolation, MaterialImage, SpectralSinogram
from .radon import Geometry, project_stack, restrict_geometry
from .spectral import SpectralModel, forward, phi

AXES = ("angular", "detector")
PARITIES = ("odd", "even")

_AXIS_DIM = {"angular": 0, "detector": 1}


@dataclass(frozen=True)
class Subset:
    """One axis-parity slice of the measurement tensor."""

    axis: str
    parity: str
    n_angles: int
    n_dets: int
    n_bins: int

    def __post_init__(self):
        if self.axis not in AXES or self.parity not in PARITIES:
            raise ContractViolation(f"unknown subset descriptor {self.axis}:{self.parity}")

    @property
    def descriptor(self) -> str:
        return f"{self.axis}:{self.parity}"

    @property
    def indices(self) -> np.ndarray:
        n = self.n_angles if self.axis == "angular" else self.n_dets
        start = 0 if self.parity == "odd" else 1  # 1-based odd = 0-based even
        return np.arange(start, n, 2, dtype=np.int64)

    def complement(self) -> "Subset":
        other = "even" if self.parity == "odd" else "odd"
        return Subset(self.axis, other, self.n_angles, self.n_dets, self.n_bins)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n_angles, self.n_dets, self.n_bins), dtype=bool)
        if self.axis == "angular":
            m[self.indices, :, :] = True
        else:
            m[:, self.indices, :] = True
        return m


@dataclass(frozen=True)
class PartitionScheme:
    """A list of partitions; each partition's subsets tile the index set."""

    n_angles: int
    n_dets: int
    n_bins: int
    partitions: tuple

    def __post_init__(self):
        for part in self.partitions:
            cover = np.zeros((self.n_angles, self.n_dets, self.n_bins), dtype=np.int64)
            for sub in part:
                cover += sub.mask()
            if not np.all(cover == 1):
                raise ContractViolation("subsets of a partition must tile the index set")

    @property
    def n_partitions(self) -> int:
        return len(self.partitions)


def _parity_pair(axis, p1, p2, b):
    return (Subset(axis, "odd", p1, p2, b), Subset(axis, "even", p1, p2, b))


def make_single_split(geom: Geometry, n_bins: int) -> PartitionScheme:
    """One partition: angular odd/even positions."""
    if geom.n_angles < 2:
        raise ContractViolation("need at least 2 angles to split")
    return PartitionScheme(
        geom.n_angles,
        geom.n_dets,
        n_bins,
        (_parity_pair("angular", geom.n_angles, geom.n_dets, n_bins),),
    )


def make_double_split(geom: Geometry, n_bins: int) -> PartitionScheme:
    """Two partitions: angular parity and detector parity; bins stay whole."""
    if geom.n_angles < 2 or geom.n_dets < 2:
        raise ContractViolation("need at least 2 angles and 2 detectors to split")
    return PartitionScheme(
        geom.n_angles,
        geom.n_dets,
        n_bins,
        (
            _parity_pair("angular", geom.n_angles, geom.n_dets, n_bins),
            _parity_pair("detector", geom.n_angles, geom.n_dets, n_bins),
        ),
    )


def scheme_for_method(method: str, geom: Geometry, n_bins: int) -> PartitionScheme:
    if method in ("xspace", "single_split"):
        return make_single_split(geom, n_bins)
    if method == "double_split":
        return make_double_split(geom, n_bins)
    raise ContractViolation(f"unknown method {method!r}")


def _check_shape(y: np.ndarray, subset: Subset):
    if y.shape != (subset.n_angles, subset.n_dets, subset.n_bins):
        raise ContractViolation(
            f"data shape {y.shape} does not match subset geometry "
            f"({subset.n_angles},{subset.n_dets},{subset.n_bins})"
        )


def restrict(y, subset: Subset) -> np.ndarray:
    """Packed restriction of y to the subset, canonical angle-major order."""
    data = y.data if isinstance(y, SpectralSinogram) else np.asarray(y, dtype=np.float64)
    _check_shape(data, subset)
    return np.ascontiguousarray(np.take(data, subset.indices, axis=_AXIS_DIM[subset.axis]))


def complement(y, subset: Subset) -> np.ndarray:
    """Packed restriction of y to the subset's complement."""
    return restrict(y, subset.complement())


def scatter(values: np.ndarray, subset: Subset) -> np.ndarray:
    """Embed packed subset values into a zero tensor of full measurement shape."""
    out = np.zeros((subset.n_angles, subset.n_dets, subset.n_bins), dtype=np.float64)
    if subset.axis == "angular":
        out[subset.indices, :, :] = values
    else:
        out[:, subset.indices, :] = values
    return out


def restricted_forward(
    model: SpectralModel, geom: Geometry, x: MaterialImage, subset: Subset
) -> np.ndarray:
    """Forward map restricted to the subset; equals masking the full forward.

    Angular subsets project only the selected angles, which is bitwise equal
    to row-selecting the full projection.
    """
    if subset.n_angles != geom.n_angles or subset.n_dets != geom.n_dets:
        raise ContractViolation("subset geometry does not match")
    if subset.axis == "angular":
        sub_geom = restrict_geometry(geom, subset.indices)
        return phi(model, project_stack(sub_geom, x))
    return restrict(forward(model, geom, x), subset)
