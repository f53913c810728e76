"""Randomized three-material head phantoms and dataset generation.

The base layout is the familiar ten-ellipse head phantom on the unit square.
Channel 0 (water) carries the classical intensity map; the four small interior
blobs double as contrast-agent regions: two are assigned to iodine and two to
gadolinium, at a configurable concentration relative to water.  Each sample
jitters every ellipse's center, axes and tilt by a uniform relative amount, so
a dataset contains structurally similar but distinct anatomy.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .core import ContractViolation, MaterialImage, RngStream, write_tensor

# columns: value, a, b, x0, y0, tilt (radians); unit-square coordinates
BASE_ELLIPSES = np.array(
    [
        [1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0],
        [-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0],
        [-0.20, 0.1100, 0.3100, 0.22, 0.0000, np.deg2rad(-18.0)],
        [-0.20, 0.1600, 0.4100, -0.22, 0.0000, np.deg2rad(18.0)],
        [0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0],
        [0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0],
        [0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0],
        [0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0],
        [0.10, 0.0230, 0.0230, 0.00, -0.6060, 0.0],
        [0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0],
    ]
)

# interior blobs carrying contrast agent (indices into BASE_ELLIPSES)
IODINE_ELLIPSES = (5, 6)
GADOLINIUM_ELLIPSES = (7, 9)

WATER_CLIP = (0.0, 1.1)

MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 64
    contrast_scale: float = 0.05
    deform_amplitude: float = 0.15
    seed: RngStream = field(default_factory=lambda: RngStream(0, "phantom"))

    n_materials = 3

    def __post_init__(self):
        if self.size < 2:
            raise ContractViolation("phantom size must be at least 2")
        if not 0.0 < self.contrast_scale <= 0.2:
            raise ContractViolation(
                f"contrast_scale must lie in (0, 0.2], got {self.contrast_scale}"
            )
        if not 0.0 <= self.deform_amplitude <= 0.3:
            raise ContractViolation(
                f"deform_amplitude must lie in [0, 0.3], got {self.deform_amplitude}"
            )


def _deformed_table(cfg: PhantomConfig) -> np.ndarray:
    """Jitter centers, axes and tilts of the base table; one fixed-size
    uniform block per phantom keeps the draw order stable.

    The two large head ellipses share a single jitter row: deforming them in
    lockstep keeps the bright rim thin and the interior area stable, so total
    water mass stays comparable across seeds instead of swinging with the gap
    between two independently resized ellipses."""
    table = BASE_ELLIPSES.copy()
    amp = cfg.deform_amplitude
    jit = cfg.seed.generator().uniform(-amp, amp, size=(table.shape[0], 5))
    jit[1] = jit[0]
    table[:, 1] *= 1.0 + jit[:, 0]
    table[:, 2] *= 1.0 + jit[:, 1]
    table[:, 3] += 0.2 * jit[:, 2]
    table[:, 4] += 0.2 * jit[:, 3]
    table[:, 5] += jit[:, 4] * (np.pi / 6.0)
    return table


def _ellipse_masks(table: np.ndarray, size: int) -> np.ndarray:
    """Indicator of each ellipse sampled at 2x2 subpixel offsets and averaged,
    returned as (n_ellipses, size, size) in [0, 1]."""
    fine = 2 * size
    # subpixel centers on [-1, 1], row 0 at the top
    u = -1.0 + (2.0 * np.arange(fine) + 1.0) / fine
    xs = u[np.newaxis, :]
    ys = -u[:, np.newaxis]
    masks = np.empty((table.shape[0], size, size), dtype=np.float64)
    for k, (_, a, b, x0, y0, tilt) in enumerate(table):
        dx = xs - x0
        dy = ys - y0
        c, s = np.cos(tilt), np.sin(tilt)
        inside = ((dx * c + dy * s) / a) ** 2 + ((-dx * s + dy * c) / b) ** 2 <= 1.0
        masks[k] = inside.reshape(size, 2, size, 2).mean(axis=(1, 3))
    return masks


def generate_phantom(cfg: PhantomConfig) -> MaterialImage:
    """Render one randomized phantom as an (3, size, size) material image."""
    table = _deformed_table(cfg)
    masks = _ellipse_masks(table, cfg.size)
    water = np.tensordot(table[:, 0], masks, axes=1)
    np.clip(water, WATER_CLIP[0], WATER_CLIP[1], out=water)
    iodine = masks[list(IODINE_ELLIPSES)].max(axis=0) * cfg.contrast_scale
    gado = masks[list(GADOLINIUM_ELLIPSES)].max(axis=0) * cfg.contrast_scale
    return MaterialImage(np.stack([water, iodine, gado]))


def generate_dataset(
    cfg: PhantomConfig,
    n_train: int,
    n_val: int,
    n_test: int,
    out_dir,
    overwrite: bool = False,
) -> list:
    """Write train/val/test phantoms to out_dir plus a manifest.

    Returns the manifest as a list of (split, filename) tuples; the text
    manifest holds one `<split> <filename>` line per file.  Every sample gets
    its own child seed, so the dataset is a pure function of cfg.seed.
    """
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if any(n < 1 for n in counts.values()):
        raise ContractViolation("every split needs at least one sample")
    out_dir = os.fspath(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not overwrite:
        raise ContractViolation(
            f"output directory {out_dir!r} is not empty (pass overwrite to replace)"
        )
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    index = 0
    for split in ("train", "val", "test"):
        for _ in range(counts[split]):
            sample_cfg = PhantomConfig(
                size=cfg.size,
                contrast_scale=cfg.contrast_scale,
                deform_amplitude=cfg.deform_amplitude,
                seed=cfg.seed.child(f"sample/{index}"),
            )
            name = f"phantom_{index:04d}.tf"
            write_tensor(os.path.join(out_dir, name), generate_phantom(sample_cfg).data)
            manifest.append((split, name))
            index += 1
    lines = "".join(f"{split} {name}\n" for split, name in manifest)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        fh.write(lines)
    return manifest


def read_manifest(data_dir) -> dict:
    """Parse the dataset manifest into {"train": [paths...], "val": ..., "test": ...}."""
    data_dir = os.fspath(data_dir)
    path = os.path.join(data_dir, MANIFEST_NAME)
    splits = {"train": [], "val": [], "test": []}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            split, name = line.split()
            if split not in splits:
                raise ContractViolation(f"unknown split {split!r} in manifest")
            splits[split].append(os.path.join(data_dir, name))
    return splits
