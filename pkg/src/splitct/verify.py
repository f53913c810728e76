"""Monte Carlo verification of the expectation identities behind the
measurement-splitting losses.

The central identity: with pixel-wise independent mean-zero noise and a
reconstruction map built only from complement data,

    E[ (1/K) sum_{i,j} ||A_{i,j} f(B^c_{i,j} y^c_{i,j}) - y_{i,j}||^2 ]
  = E[ (1/K) sum_{i,j} ||A_{i,j} f(B^c_{i,j} y^c_{i,j}) - A_{i,j} x||^2 ]
  + E ||noise||^2.

The verifier estimates both sides over R independent Gaussian draws,
subtracts the analytic noise energy, and tests the residual gap against
three Monte Carlo standard errors computed from the per-draw gap samples.
The complement-side reconstructions are recomputed for every draw — the
whole point is that the cross term vanishes because they depend on the noise
only through the complement.

A pixel-parity (checkerboard) variant checks the plain denoising identity
for maps that never read the pixel they predict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ContractViolation, MaterialImage, RngStream, SpectralSinogram
from .model import NetConfig, net_forward_batch
from .partition import PartitionScheme, restrict, restricted_forward
from .radon import Geometry, backproject_stack, project_stack, restrict_geometry
from .solver import SolverConfig, interpolate_detector_columns, partial_reconstruction
from .spectral import SpectralModel, forward


@dataclass(frozen=True)
class VerifyReport:
    lhs: float
    sup: float
    noise_analytic: float
    gap: float
    se: float
    passed: bool
    draws: int

    def to_csv(self) -> str:
        return (
            "lhs,sup,noise_analytic,gap,se,pass\n"
            f"{self.lhs:.12g},{self.sup:.12g},{self.noise_analytic:.12g},"
            f"{self.gap:.12g},{self.se:.12g},{int(self.passed)}\n"
        )

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"draws           : {self.draws}\n"
            f"mean lhs        : {self.lhs:.6e}\n"
            f"mean supervised : {self.sup:.6e}\n"
            f"analytic noise  : {self.noise_analytic:.6e}\n"
            f"gap             : {self.gap:.6e}\n"
            f"standard error  : {self.se:.6e}\n"
            f"|gap| <= 3 se   : {status}\n"
        )


def frozen_net_map(params, net_cfg: NetConfig):
    """Wrap fixed network parameters as a channel-wise image map."""

    def apply(stack: np.ndarray) -> np.ndarray:
        outs, _ = net_forward_batch(params, net_cfg, stack)
        return outs

    return apply


def constant_map(value: np.ndarray):
    """A map that ignores its input (the cross term is exactly mean-zero)."""
    fixed = np.array(value, dtype=np.float64)

    def apply(stack: np.ndarray) -> np.ndarray:
        if fixed.shape != stack.shape:
            raise ContractViolation("constant map shaped for a different stack")
        return fixed

    return apply


def _linear_partial_reconstruction(geom, y_subset, subset, cfg: SolverConfig):
    """Least-squares iteration for the identity-spectrum case: plain
    gradient descent on ||R x - y||^2 from zero, matching the solver
    module's handling of angular and detector subsets."""
    y_subset = np.asarray(y_subset, dtype=np.float64)
    if subset.axis == "angular":
        sub_geom = restrict_geometry(geom, subset.indices)
        data = y_subset
    else:
        sub_geom = geom
        data = interpolate_detector_columns(y_subset, subset.indices, geom.n_dets)
    m = data.shape[-1]
    x = np.zeros((m, geom.size, geom.size))
    for k in range(cfg.n_iters):
        resid = project_stack(sub_geom, x) - data
        x = x - cfg.step_at(k) * backproject_stack(sub_geom, resid)
        if not np.all(np.isfinite(x)):
            raise ContractViolation(f"non-finite iterate at iteration {k}")
    return MaterialImage(x)


def verify_theorem1(
    model,
    geom: Geometry,
    scheme: PartitionScheme,
    x: MaterialImage,
    f,
    sigma: float,
    n_draws: int,
    seed: RngStream,
    solver_cfg: SolverConfig | None = None,
    noise_kind: str = "gaussian",
) -> VerifyReport:
    """Estimate both sides of the splitting identity over n_draws Gaussian
    noise realizations.

    model=None selects the identity spectrum (the forward map is the plain
    channel-wise projection), which covers the single-partition linear
    corollaries with no separate code path.  f maps a material stack to a
    material stack and must be fixed; it is never trained here.
    """
    if noise_kind != "gaussian":
        raise ContractViolation(
            "the identity is verified under gaussian noise only; "
            f"got noise kind {noise_kind!r}"
        )
    if sigma < 0:
        raise ContractViolation("sigma must be nonnegative")
    if solver_cfg is None:
        solver_cfg = SolverConfig(n_iters=40)
    if model is not None and scheme.n_bins != model.n_bins:
        raise ContractViolation("scheme bin count does not match the model")
    if model is None and scheme.n_bins != x.materials:
        raise ContractViolation(
            "identity spectrum needs one measurement bin per material channel"
        )

    if model is not None:
        y_clean = forward(model, geom, x).data
    else:
        y_clean = project_stack(geom, x.data)
    subsets = [s for partition in scheme.partitions for s in partition]
    k = len(scheme.partitions)
    targets_clean = [restrict(y_clean, s) for s in subsets]
    n_total = y_clean.size
    noise_energy = n_total * sigma**2

    rng = seed.generator()
    gaps = np.empty(n_draws)
    lhs_all = np.empty(n_draws)
    sup_all = np.empty(n_draws)
    for r in range(n_draws):
        y = y_clean + rng.normal(0.0, sigma, size=y_clean.shape)
        lhs_r = 0.0
        sup_r = 0.0
        for s_idx, subset in enumerate(subsets):
            comp = subset.complement()
            y_comp = restrict(y, comp)
            if model is not None:
                recon = partial_reconstruction(model, geom, y_comp, comp, solver_cfg)
                pred = restricted_forward(
                    model, geom, MaterialImage(f(recon.data)), subset
                )
            else:
                recon = _linear_partial_reconstruction(geom, y_comp, comp, solver_cfg)
                mapped = f(recon.data)
                if subset.axis == "angular":
                    pred = project_stack(
                        restrict_geometry(geom, subset.indices), mapped
                    )
                else:
                    pred = np.take(
                        project_stack(geom, mapped), subset.indices, axis=1
                    )
            lhs_r += np.sum((pred - restrict(y, subset)) ** 2)
            sup_r += np.sum((pred - targets_clean[s_idx]) ** 2)
        lhs_all[r] = lhs_r / k
        sup_all[r] = sup_r / k
        gaps[r] = lhs_all[r] - sup_all[r] - noise_energy

    gap = float(np.mean(gaps))
    se = float(np.std(gaps, ddof=1) / np.sqrt(n_draws)) if n_draws > 1 else 0.0
    return VerifyReport(
        lhs=float(np.mean(lhs_all)),
        sup=float(np.mean(sup_all)),
        noise_analytic=float(noise_energy),
        gap=gap,
        se=se,
        passed=bool(abs(gap) <= 3.0 * se),
        draws=n_draws,
    )


# -- pixel-parity denoising identity -------------------------------------------


def checkerboard_mask(shape) -> np.ndarray:
    """Boolean mask of the even-parity pixels ((row+col) % 2 == 0)."""
    h, w = shape
    rows = np.arange(h)[:, np.newaxis]
    cols = np.arange(w)[np.newaxis, :]
    return (rows + cols) % 2 == 0


def masked_neighbor_average(img: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Estimate every pixel as the mean of its known 4-neighbors."""
    if not known.any():
        raise ContractViolation("interpolation needs at least one known pixel")
    values = np.where(known, img, 0.0)
    weights = known.astype(np.float64)
    padded_v = np.pad(values, 1)
    padded_w = np.pad(weights, 1)
    total = (
        padded_v[:-2, 1:-1] + padded_v[2:, 1:-1]
        + padded_v[1:-1, :-2] + padded_v[1:-1, 2:]
    )
    count = (
        padded_w[:-2, 1:-1] + padded_w[2:, 1:-1]
        + padded_w[1:-1, :-2] + padded_w[1:-1, 2:]
    )
    return total / np.maximum(count, 1.0)


def pixel_parity_denoiser(f=None):
    """Build a map whose output on each parity class reads only the other
    class: each half is replaced by interpolation from its complement before
    f sees it, and only the interpolated half of f's output is kept.
    f defaults to the identity."""

    def g(img: np.ndarray) -> np.ndarray:
        out = np.empty_like(img, dtype=np.float64)
        even = checkerboard_mask(img.shape)
        for mask in (even, ~even):
            filled = masked_neighbor_average(img, ~mask)
            z = np.where(mask, filled, img)
            fz = z if f is None else f(z)
            out[mask] = fz[mask]
        return out

    return g


def probe_diagonal_free(g, shape, seed: RngStream, n_probes: int = 100) -> None:
    """Perturb single pixels and require the output at the perturbed pixel's
    parity class to stay exactly unchanged; raise naming the first violator."""
    rng = seed.generator()
    base = rng.normal(size=shape)
    even = checkerboard_mask(shape)
    out_base = g(base)
    for _ in range(n_probes):
        i = int(rng.integers(shape[0]))
        j = int(rng.integers(shape[1]))
        bumped = base.copy()
        bumped[i, j] += rng.normal() + 1.0
        out = g(bumped)
        mask = even if even[i, j] else ~even
        if not np.array_equal(out[mask], out_base[mask]):
            raise ContractViolation(
                f"map is not diagonal-free: output at parity of pixel ({i},{j}) "
                "depends on that pixel"
            )


def verify_prop_noise2self(
    g,
    x: np.ndarray,
    sigma: float,
    n_draws: int,
    seed: RngStream,
    check_diagonal_free: bool = True,
) -> VerifyReport:
    """Same gap test for a pixel-parity denoiser on images y = x + noise,
    with analytic noise energy N * sigma^2.

    check_diagonal_free=False skips the structural probe so that a
    deliberately coupled map can serve as a negative control.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractViolation("expected a single-channel image")
    if sigma < 0:
        raise ContractViolation("sigma must be nonnegative")
    if check_diagonal_free:
        probe_diagonal_free(g, x.shape, seed.child("probe"))
    noise_energy = x.size * sigma**2
    rng = seed.generator()
    gaps = np.empty(n_draws)
    lhs_all = np.empty(n_draws)
    sup_all = np.empty(n_draws)
    for r in range(n_draws):
        y = x + rng.normal(0.0, sigma, size=x.shape)
        gy = g(y)
        lhs_all[r] = np.sum((gy - y) ** 2)
        sup_all[r] = np.sum((gy - x) ** 2)
        gaps[r] = lhs_all[r] - sup_all[r] - noise_energy
    gap = float(np.mean(gaps))
    se = float(np.std(gaps, ddof=1) / np.sqrt(n_draws)) if n_draws > 1 else 0.0
    return VerifyReport(
        lhs=float(np.mean(lhs_all)),
        sup=float(np.mean(sup_all)),
        noise_analytic=float(noise_energy),
        gap=gap,
        se=se,
        passed=bool(abs(gap) <= 3.0 * se),
        draws=n_draws,
    )
