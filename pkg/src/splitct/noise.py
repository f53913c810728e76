"""Measurement noise simulation.

Two regimes: photon-counting noise (Poisson statistics at I0 photons per ray
per bin, rescaled to normalized intensity, plus additive electronic noise)
and idealized additive Gaussian noise with a closed-form energy, used by the
risk-identity verification. Entries are drawn independently per
(angle, detector, bin) coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ContractViolation, RngStream, SpectralSinogram

KINDS = ("poisson_electronic", "gaussian", "none")


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "poisson_electronic"
    i0: float = 1e5
    sigma_e: float = 1e-3
    sigma_g: float | None = None
    seed: RngStream = field(default_factory=lambda: RngStream(0, "noise"))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown noise kind {self.kind!r}")
        if self.i0 < 1:
            raise ContractViolation("i0 must be >= 1")
        if self.sigma_e < 0 or (self.sigma_g is not None and self.sigma_g < 0):
            raise ContractViolation("noise standard deviations must be >= 0")
        if self.kind == "gaussian" and self.sigma_g is None:
            raise ContractViolation("gaussian noise requires sigma_g")


def apply_noise(cfg: NoiseConfig, y_clean: SpectralSinogram) -> SpectralSinogram:
    """Draw one noise realization on top of a clean sinogram.

    Deterministic given cfg.seed; kind "none" returns the input unchanged.
    """
    if cfg.kind == "none":
        return y_clean
    data = y_clean.data
    rng = cfg.seed.generator()
    if cfg.kind == "gaussian":
        if cfg.sigma_g == 0.0:
            return SpectralSinogram(data.copy())
        noisy = data + rng.normal(0.0, cfg.sigma_g, size=data.shape)
        return SpectralSinogram(noisy)
    # poisson_electronic
    if data.min() < 0:
        raise ContractViolation("photon-counting noise needs nonnegative intensities")
    counts = rng.poisson(cfg.i0 * data).astype(np.float64)
    noisy = counts / cfg.i0
    if cfg.sigma_e > 0:
        noisy = noisy + rng.normal(0.0, cfg.sigma_e, size=data.shape)
    return SpectralSinogram(noisy)
