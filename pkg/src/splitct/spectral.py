"""Spectral measurement model: pointwise nonlinearity, full forward map,
its per-ray Jacobian, and the precomputed decomposition preconditioner.

A measurement for energy bin b of a ray with per-material line integrals z is

    phi_b(z) = sum_i s[b,i] * exp(-sum_m mu[i,m] * z[m])

with per-bin spectra S (rows summing to 1) and the attenuation table mu.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .core import (
    ContractViolation,
    MaterialImage,
    SpectralSinogram,
    TensorFormatError,
    read_tensor,
    write_tensor,
)
from .radon import Geometry, project_stack

log = logging.getLogger(__name__)

# exponent clamp: exp argument above this means strongly negative line
# integrals (non-physical); computation continues with the clamped value
EXP_CLAMP = 50.0

# floor applied to measured intensities before logarithms
LOG_FLOOR = 1e-6

# pseudoinverse singular-value cutoff, relative to the largest singular value
PINV_CUTOFF = 1e-10


@dataclass(frozen=True)
class SpectralModel:
    """Discretized spectra, attenuation table, and derived preconditioner.

    spectra: (B, E), nonnegative, each row sums to 1.
    attenuation: (E, M), positive, water-equivalent units per pixel length.
    u = spectra @ attenuation, (B, M); u_dagger its Moore-Penrose inverse.
    """

    energies: np.ndarray
    spectra: np.ndarray
    attenuation: np.ndarray
    u: np.ndarray
    u_dagger: np.ndarray

    @property
    def n_energies(self) -> int:
        return self.spectra.shape[1]

    @property
    def n_bins(self) -> int:
        return self.spectra.shape[0]

    @property
    def n_materials(self) -> int:
        return self.attenuation.shape[1]


def make_spectral_model(spectra, attenuation, energies=None) -> SpectralModel:
    """Validate and assemble a SpectralModel, normalizing spectra rows to 1.

    Raises on rank-deficient bin response (B >= M with full column rank is
    required for the decomposition preconditioner to exist).
    """
    s = np.ascontiguousarray(spectra, dtype=np.float64)
    mu = np.ascontiguousarray(attenuation, dtype=np.float64)
    if s.ndim != 2 or mu.ndim != 2 or s.shape[1] != mu.shape[0]:
        raise ContractViolation(f"incompatible table shapes {s.shape} / {mu.shape}")
    b, e = s.shape
    m = mu.shape[1]
    if b < m:
        raise ContractViolation(f"need at least as many bins as materials (B={b}, M={m})")
    if np.any(s < 0):
        raise ContractViolation("spectra must be nonnegative")
    if np.any(mu < 0):
        raise ContractViolation("attenuation table must be nonnegative")
    row_sums = s.sum(axis=1)
    if np.any(row_sums <= 0):
        raise ContractViolation("every spectrum row needs positive total weight")
    s = s / row_sums[:, None]
    if energies is None:
        energies = np.arange(1, e + 1, dtype=np.float64)
    energies = np.ascontiguousarray(energies, dtype=np.float64)
    u = s @ mu
    sv = np.linalg.svd(u, compute_uv=False)
    if sv[-1] <= PINV_CUTOFF * sv[0]:
        raise ValueError(f"bin response matrix is rank deficient (singular values {sv})")
    u_dagger = np.linalg.pinv(u, rcond=PINV_CUTOFF)
    if np.max(np.abs(u @ u_dagger @ u - u)) > 1e-8:
        raise ValueError("pseudoinverse failed the reconstruction identity")
    return SpectralModel(
        energies=energies, spectra=s, attenuation=mu, u=u, u_dagger=u_dagger
    )


def _kedge_curve(e, base_pe, base_c, edge_kev, jump):
    """Smooth photoelectric+Compton style curve with an absorption edge."""
    curve = base_pe * (30.0 / e) ** 3 + base_c
    above = e >= edge_kev
    curve = curve + np.where(above, jump * (edge_kev / e) ** 3, 0.0)
    return curve


def build_default_model(
    n_energies: int = 150, n_bins: int = 5, n_materials: int = 3, seed=None
) -> SpectralModel:
    """Synthetic three-material model with physically shaped tables.

    Energies sit on uniform nodes spanning the 20-150 keV detection window
    (photon-counting detectors threshold away the soft tail, where power-law
    attenuation would dwarf everything else).  Water follows a smooth
    decreasing power-law-plus-constant curve; the two contrast materials add
    absorption-edge jumps at 33.2 keV and 50.2 keV.  The per-bin spectra are
    overlapping smooth bumps under a bremsstrahlung-like envelope.  Passing a
    seed stream jitters the bump centers slightly.
    """
    if n_materials != 3:
        raise ContractViolation("default tables are defined for exactly 3 materials")
    if n_bins < n_materials or n_energies < n_bins:
        raise ContractViolation("need E >= B >= M")
    e = 20.0 + (np.arange(n_energies, dtype=np.float64) + 0.5) * (130.0 / n_energies)

    water = 0.0814 * (0.35 * (30.0 / e) ** 3 + 1.0)
    iodine = 1.10 * _kedge_curve(e, 0.30, 0.70, 33.2, 2.5)
    gadolinium = 0.90 * _kedge_curve(e, 0.30, 0.65, 50.2, 3.0)
    mu = np.stack([water, iodine, gadolinium], axis=1)

    centers = np.linspace(25.0, 125.0, n_bins)
    widths = np.full(n_bins, 0.75 * (centers[1] - centers[0]) if n_bins > 1 else 30.0)
    if seed is not None:
        rng = seed.generator()
        centers = centers + rng.uniform(-2.0, 2.0, size=n_bins)
        widths = widths * (1.0 + rng.uniform(-0.1, 0.1, size=n_bins))
    envelope = np.maximum(e * (160.0 - e), 0.0)
    spectra = envelope[None, :] * np.exp(
        -0.5 * ((e[None, :] - centers[:, None]) / widths[:, None]) ** 2
    )
    return make_spectral_model(spectra, mu, energies=e)


def phi(model: SpectralModel, z: np.ndarray) -> np.ndarray:
    """Per-ray intensities: maps (..., M) line integrals to (..., B) bins.

    The exponent is clamped at +EXP_CLAMP (strongly negative z); occurrences
    are logged and computation continues.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.n_materials:
        raise ContractViolation(f"last axis of z must have M={model.n_materials} entries")
    if not np.all(np.isfinite(z)):
        raise ContractViolation("line integrals must be finite")
    arg = -(z @ model.attenuation.T)
    n_clamped = int(np.count_nonzero(arg > EXP_CLAMP))
    if n_clamped:
        log.warning("clamped %d non-physical exponent(s) above %g", n_clamped, EXP_CLAMP)
        arg = np.minimum(arg, EXP_CLAMP)
    return np.exp(arg) @ model.spectra.T


def phi_jacobian(model: SpectralModel, z: np.ndarray) -> np.ndarray:
    """Derivative of :func:`phi` w.r.t. z: shape (..., B, M).

    Entry (b, m) is -sum_i s[b,i] * mu[i,m] * exp(-sum_m' mu[i,m'] z[m']).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.n_materials:
        raise ContractViolation(f"last axis of z must have M={model.n_materials} entries")
    arg = np.minimum(-(z @ model.attenuation.T), EXP_CLAMP)
    w = np.exp(arg)  # (..., E)
    return -np.einsum("be,...e,em->...bm", model.spectra, w, model.attenuation)


def forward(model: SpectralModel, geom: Geometry, x: MaterialImage) -> SpectralSinogram:
    """Full nonlinear forward map: spectral nonlinearity of the channel-wise
    line integrals; output entries lie in (0, 1] for nonnegative input."""
    z = project_stack(geom, x)
    return SpectralSinogram(phi(model, z))


def log_forward_residual(
    model: SpectralModel, geom: Geometry, x: MaterialImage, y: SpectralSinogram
) -> np.ndarray:
    """Pointwise log of the forward map minus log of the floored data."""
    a = forward(model, geom, x).data
    y_floored = np.maximum(y.data, LOG_FLOOR)
    return np.log(a) - np.log(y_floored)


_MODEL_FILES = ("spectra.tf", "attenuation.tf", "u.tf", "u_dagger.tf")
_MODEL_META = "meta.txt"


def save_model(out_dir, model: SpectralModel) -> None:
    """Write the model as a four-tensor bundle plus text metadata.

    The bundle holds spectra, attenuation, bin response and its pseudoinverse;
    the energy grid travels in the metadata at full precision.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    for name, table in zip(
        _MODEL_FILES, (model.spectra, model.attenuation, model.u, model.u_dagger)
    ):
        write_tensor(os.path.join(out_dir, name), table)
    lines = [
        f"n_energies={model.n_energies}",
        f"n_bins={model.n_bins}",
        f"n_materials={model.n_materials}",
        "energies=" + ",".join(repr(float(v)) for v in model.energies),
    ]
    with open(os.path.join(out_dir, _MODEL_META), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(in_dir) -> SpectralModel:
    """Rebuild a model from :func:`save_model` output.

    The factor tables are re-assembled in 64-bit precision (renormalizing the
    32-bit rounded spectra rows); the stored bin-response pair is checked for
    consistency against the recomputed one.
    """
    in_dir = os.fspath(in_dir)
    tables = [read_tensor(os.path.join(in_dir, name))[1] for name in _MODEL_FILES]
    spectra, attenuation, u_stored, u_dagger_stored = tables
    meta = {}
    with open(os.path.join(in_dir, _MODEL_META)) as fh:
        for line in fh:
            key, _, value = line.strip().partition("=")
            meta[key] = value
    energies = np.array([float(v) for v in meta["energies"].split(",")])
    if energies.size != spectra.shape[1]:
        raise TensorFormatError(
            f"{in_dir}: metadata lists {energies.size} energies "
            f"for {spectra.shape[1]} spectrum columns"
        )
    model = make_spectral_model(spectra, attenuation, energies=energies)
    # stored tables are float32; admit exactly that rounding and nothing more
    for name, stored, exact in (
        ("u", u_stored, model.u),
        ("u_dagger", u_dagger_stored, model.u_dagger),
    ):
        tol = 1e-5 * max(1.0, float(np.abs(exact).max()))
        if np.abs(stored - exact).max() > tol:
            raise TensorFormatError(
                f"{in_dir}: stored {name} table disagrees with the factor tables"
            )
    return model
