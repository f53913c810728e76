"""Image quality metrics with explicit data-range conventions.

Material channels differ in scale by more than an order of magnitude
(water ~1, contrast agents ~0.05), so every metric records which range
convention produced it: the reference image's max for ground-truth
comparisons, the max over the pair when no reference exists.
"""

from __future__ import annotations

import logging

import numpy as np

from .core import ContractViolation, MaterialImage

log = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

MATERIAL_NAMES = ("water", "iodine", "gadolinium")


def _resolve_range(a, b, data_range):
    if data_range == "max_of_pair":
        return float(max(a.max(), b.max()))
    return float(data_range)


def psnr(a: np.ndarray, b: np.ndarray, data_range="max_of_pair") -> float:
    """10*log10(range^2 / MSE), capped at 99 dB.

    data_range is either the string "max_of_pair" (the reference-free
    default) or a fixed positive value (ground-truth comparisons pass the
    reference image's max).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    rng = _resolve_range(a, b, data_range)
    if rng <= 0:
        log.warning("psnr: zero data range, returning the cap")
        return PSNR_CAP_DB
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    value = 10.0 * np.log10(rng * rng / mse)
    return min(float(value), PSNR_CAP_DB)


def _gaussian_kernel_1d():
    half = SSIM_WINDOW // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _windowed_mean(img, kernel):
    """Gaussian-weighted local mean with truncated, renormalized windows at
    the borders (separable passes, zero padding divided by the weight mass)."""
    from scipy.ndimage import correlate1d

    num = correlate1d(img, kernel, axis=0, mode="constant", cval=0.0)
    num = correlate1d(num, kernel, axis=1, mode="constant", cval=0.0)
    ones = np.ones_like(img)
    den = correlate1d(ones, kernel, axis=0, mode="constant", cval=0.0)
    den = correlate1d(den, kernel, axis=1, mode="constant", cval=0.0)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, data_range) -> float:
    """Mean local structural similarity, 11x11 Gaussian window, sigma 1.5."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ContractViolation(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    rng = _resolve_range(a, b, data_range)
    c1 = (SSIM_K1 * rng) ** 2
    c2 = (SSIM_K2 * rng) ** 2
    kernel = _gaussian_kernel_1d()
    mu_a = _windowed_mean(a, kernel)
    mu_b = _windowed_mean(b, kernel)
    var_a = _windowed_mean(a * a, kernel) - mu_a * mu_a
    var_b = _windowed_mean(b * b, kernel) - mu_b * mu_b
    cov = _windowed_mean(a * b, kernel) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def evaluate(recon: MaterialImage, truth: MaterialImage) -> dict:
    """Per-material {name: {psnr_db, ssim, data_range_mode}} rows; the
    reference channel max sets the range."""
    if recon.materials != truth.materials:
        raise ContractViolation("material count mismatch")
    rows = {}
    for m in range(truth.materials):
        ref = truth.data[m]
        rng = float(ref.max())
        name = MATERIAL_NAMES[m] if m < len(MATERIAL_NAMES) else f"material{m}"
        rows[name] = {
            "psnr_db": psnr(recon.data[m], ref, rng if rng > 0 else "max_of_pair"),
            "ssim": ssim(recon.data[m], ref, rng if rng > 0 else "max_of_pair"),
            "data_range_mode": "max_of_reference",
        }
    return rows


def evaluate_csv(rows: dict) -> str:
    lines = ["material,psnr_db,ssim,data_range_mode"]
    for name, r in rows.items():
        lines.append(f"{name},{r['psnr_db']:.6f},{r['ssim']:.8f},{r['data_range_mode']}")
    return "\n".join(lines) + "\n"
