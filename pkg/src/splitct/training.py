"""Self-supervised training of the per-channel network.

Three methods share one harness and differ only in the loss:

  xspace        image-domain distance between the network's output on the
                complement-side reconstruction and the subset-side
                reconstruction (one angular partition);
  single_split  measurement-domain distance through the nonlinear forward
                map, restricted to the held-out angular subset;
  double_split  the same with two partitions (angular + detector parity).

Reconstruction pairs are fixed: they are computed once per sample from the
noisy data and cached, and training never re-runs the iterative solver.  One
epoch is one pass over the training samples in manifest order, one Adam step
per sample.  Every eval_interval epochs a reference-free consistency PSNR
between the two subset-side outputs of each partition is measured on the
validation samples; training keeps the parameters from the best evaluation
and halts once the metric has not improved for `patience` epochs.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ContractViolation, MaterialImage, RngStream, read_tensor
from .metrics import MATERIAL_NAMES, evaluate, psnr
from .model import (
    NetConfig,
    adam_step,
    init_adam,
    init_params,
    net_backward_batch,
    net_forward_batch,
    save_checkpoint,
)
from .noise import NoiseConfig, apply_noise
from .partition import PartitionScheme, restrict
from .phantom import read_manifest
from .radon import Geometry, backproject_stack, project_stack, restrict_geometry
from .solver import SolverConfig, partial_reconstruction
from .spectral import SpectralModel, forward, phi, phi_jacobian

log = logging.getLogger(__name__)

METHODS = ("xspace", "single_split", "double_split")

DIVERGENCE_LIMIT = 1e6

BEST_DIR = "best"
FINAL_DIR = "final"
TRACE_FILE = "trace.csv"
CACHE_DIR = "cache"


@dataclass(frozen=True)
class MethodConfig:
    method: str
    scheme: PartitionScheme
    solver: SolverConfig = field(default_factory=SolverConfig)
    net: NetConfig = field(default_factory=NetConfig)
    max_epochs: int = 15000
    patience: int = 500
    eval_interval: int = 25
    lr: float = 1e-4
    seed: RngStream = field(default_factory=lambda: RngStream(0, "train"))
    shuffle: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractViolation(f"unknown method {self.method!r}")
        axes = tuple(p[0].axis for p in self.scheme.partitions)
        if self.method in ("xspace", "single_split") and axes != ("angular",):
            raise ContractViolation(
                f"{self.method} needs the single angular partition, got {axes}"
            )
        if self.method == "double_split" and axes != ("angular", "detector"):
            raise ContractViolation(
                f"double_split needs the angular+detector scheme, got {axes}"
            )
        if self.max_epochs < 0 or self.patience < 1 or self.eval_interval < 1:
            raise ContractViolation("bad epoch/patience/eval settings")
        if self.lr <= 0:
            raise ContractViolation("learning rate must be positive")


@dataclass(frozen=True)
class Pair:
    """One (partition, subset) training pair for a single sample."""

    input_image: MaterialImage  # reconstruction from the complement data
    target_y: np.ndarray  # measurements restricted to the subset
    subset: object
    target_image: MaterialImage  # reconstruction from the subset data


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    loss: float
    stop_metric: float
    psnr_iodine: float
    psnr_gadolinium: float
    psnr_water: float


@dataclass(frozen=True)
class TrainResult:
    best_epoch: int
    best_params: np.ndarray
    final_epoch: int
    final_params: np.ndarray
    trace: tuple


def trace_to_csv(records) -> str:
    lines = ["epoch,loss,stop_metric,psnr_iodine,psnr_gadolinium,psnr_water"]
    for r in records:
        lines.append(
            f"{r.epoch},{r.loss:.12g},{r.stop_metric:.12g},"
            f"{r.psnr_iodine:.12g},{r.psnr_gadolinium:.12g},{r.psnr_water:.12g}"
        )
    return "\n".join(lines) + "\n"


# -- reconstruction pairs -----------------------------------------------------


def _cache_key(model, geom, scheme, y, solver_cfg) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(y.data).tobytes())
    h.update(repr(geom.cache_key()).encode())
    h.update(repr(solver_cfg).encode())
    h.update(np.ascontiguousarray(model.spectra).tobytes())
    h.update(np.ascontiguousarray(model.attenuation).tobytes())
    for partition in scheme.partitions:
        for subset in partition:
            h.update(subset.descriptor.encode())
    return h.hexdigest()


def precompute_pairs(
    model: SpectralModel,
    geom: Geometry,
    scheme: PartitionScheme,
    y,
    solver_cfg: SolverConfig,
    cache_dir=None,
    sample_id: str = "sample",
) -> list:
    """Build the fixed reconstruction pairs for one measurement.

    For each partition i and subset j: the input image is the solver run on
    the complement data, the target image is the solver run on the subset
    data, and the target measurements are the subset restriction of y.  When
    cache_dir is given the two images are stored per (sample_id, i, j) and
    reused if the cache key (data + configuration hash) still matches.
    """
    if (y.n_angles, y.n_dets, y.n_bins) != (
        scheme.n_angles,
        scheme.n_dets,
        scheme.n_bins,
    ):
        raise ContractViolation("partition scheme does not match the data shape")
    key = _cache_key(model, geom, scheme, y, solver_cfg)
    root = None
    if cache_dir is not None:
        root = os.path.join(os.fspath(cache_dir), sample_id)
        key_path = os.path.join(root, "key.txt")
        stored = None
        if os.path.exists(key_path):
            with open(key_path) as fh:
                stored = fh.read().strip()
        if stored == key:
            try:
                return _load_cached_pairs(root, scheme, y)
            except (OSError, ValueError) as exc:
                log.warning("pair cache for %s unreadable (%s); recomputing", sample_id, exc)
        elif stored is not None:
            log.warning("pair cache key mismatch for %s; recomputing", sample_id)
    pairs = []
    for i, partition in enumerate(scheme.partitions):
        for j, subset in enumerate(partition):
            comp = subset.complement()
            input_img = partial_reconstruction(
                model, geom, restrict(y, comp), comp, solver_cfg
            )
            target_img = partial_reconstruction(
                model, geom, restrict(y, subset), subset, solver_cfg
            )
            pairs.append(Pair(input_img, restrict(y, subset), subset, target_img))
            if root is not None:
                os.makedirs(root, exist_ok=True)
                np.save(os.path.join(root, f"pair_{i}_{j}_input.npy"), input_img.data)
                np.save(os.path.join(root, f"pair_{i}_{j}_target.npy"), target_img.data)
    if root is not None:
        with open(os.path.join(root, "key.txt"), "w") as fh:
            fh.write(key + "\n")
    return pairs


def _load_cached_pairs(root, scheme, y) -> list:
    pairs = []
    for i, partition in enumerate(scheme.partitions):
        for j, subset in enumerate(partition):
            input_img = np.load(os.path.join(root, f"pair_{i}_{j}_input.npy"))
            target_img = np.load(os.path.join(root, f"pair_{i}_{j}_target.npy"))
            pairs.append(
                Pair(
                    MaterialImage(input_img),
                    restrict(y, subset),
                    subset,
                    MaterialImage(target_img),
                )
            )
    return pairs


# -- losses -------------------------------------------------------------------


def _batched_net(params, net_cfg, pairs, which):
    stacks = [getattr(p, which).data for p in pairs]
    imgs = np.concatenate(stacks, axis=0)
    outs, tape = net_forward_batch(params, net_cfg, imgs)
    return outs, tape


def loss_y(model, geom, net_cfg, params, pairs):
    """Measurement-domain loss through the nonlinear forward map, and its
    parameter gradient.

    loss = (1/K) sum_{i,j} || A_{i,j}(net(input_{i,j})) - y_{i,j} ||^2 with
    the network applied channel-wise; the gradient chains the measurement
    residual through the spectral Jacobian, the restricted backprojection and
    the network's reverse pass, accumulated over partitions, subsets and
    channels.
    """
    k = len(pairs) // 2
    m = pairs[0].input_image.materials
    outs, tape = _batched_net(params, net_cfg, pairs, "input_image")
    grad_imgs = np.empty_like(outs)
    scale = 1.0 / k
    total = 0.0
    for idx, pair in enumerate(pairs):
        out = outs[idx * m : (idx + 1) * m]
        if pair.subset.axis == "angular":
            sub_geom = restrict_geometry(geom, pair.subset.indices)
            z = project_stack(sub_geom, out)
            resid = phi(model, z) - pair.target_y
            gz = 2.0 * scale * np.einsum("pqb,pqbm->pqm", resid, phi_jacobian(model, z))
            grad_imgs[idx * m : (idx + 1) * m] = backproject_stack(sub_geom, gz)
        else:
            z = project_stack(geom, out)
            pred = np.take(phi(model, z), pair.subset.indices, axis=1)
            resid = pred - pair.target_y
            z_sub = np.take(z, pair.subset.indices, axis=1)
            g_sub = 2.0 * scale * np.einsum(
                "pqb,pqbm->pqm", resid, phi_jacobian(model, z_sub)
            )
            gz = np.zeros_like(z)
            gz[:, pair.subset.indices, :] = g_sub
            grad_imgs[idx * m : (idx + 1) * m] = backproject_stack(geom, gz)
        term = scale * float(np.sum(resid * resid))
        if not np.isfinite(term):
            raise ContractViolation(
                f"non-finite loss on pair {pair.subset.descriptor!r}"
            )
        total += term
    grads, _ = net_backward_batch(params, net_cfg, tape, grad_imgs)
    return total, grads


def loss_x(net_cfg, params, pairs):
    """Image-domain loss between the network's output on the complement-side
    reconstruction and the subset-side reconstruction."""
    m = pairs[0].input_image.materials
    outs, tape = _batched_net(params, net_cfg, pairs, "input_image")
    grad_imgs = np.empty_like(outs)
    total = 0.0
    for idx, pair in enumerate(pairs):
        resid = outs[idx * m : (idx + 1) * m] - pair.target_image.data
        grad_imgs[idx * m : (idx + 1) * m] = 2.0 * resid
        term = float(np.sum(resid * resid))
        if not np.isfinite(term):
            raise ContractViolation(
                f"non-finite loss on pair {pair.subset.descriptor!r}"
            )
        total += term
    grads, _ = net_backward_batch(params, net_cfg, tape, grad_imgs)
    return total, grads


def early_stop_metric(net_cfg, params, pairs) -> float:
    """Reference-free consistency: average PSNR between the network outputs
    on the two subset-side reconstructions of each partition, over partitions
    and channels."""
    k = len(pairs) // 2
    m = pairs[0].input_image.materials
    outs, _ = _batched_net(params, net_cfg, pairs, "target_image")
    total = 0.0
    for i in range(k):
        first = outs[(2 * i) * m : (2 * i + 1) * m]
        second = outs[(2 * i + 1) * m : (2 * i + 2) * m]
        for mm in range(m):
            total += psnr(second[mm], first[mm])
    return total / (k * m)


def infer_from_pairs(net_cfg, params, pairs) -> MaterialImage:
    """Average the network's outputs on the complement-side reconstructions
    over all partitions and subsets."""
    m = pairs[0].input_image.materials
    outs, _ = _batched_net(params, net_cfg, pairs, "input_image")
    h, w = outs.shape[1:]
    stacked = outs.reshape(len(pairs), m, h, w)
    return MaterialImage(stacked.mean(axis=0))


def infer(params, net_cfg, model, geom, y, scheme, solver_cfg) -> MaterialImage:
    """Reconstruct a measurement with a trained network."""
    pairs = precompute_pairs(model, geom, scheme, y, solver_cfg)
    return infer_from_pairs(net_cfg, params, pairs)


# -- training harness ---------------------------------------------------------


@dataclass(frozen=True)
class _Sample:
    name: str
    truth: MaterialImage
    pairs: tuple


def _load_split(paths, model, geom, mcfg, noise_cfg, cache_root):
    samples = []
    for path in paths:
        name = os.path.splitext(os.path.basename(path))[0]
        _, data = read_tensor(path)
        truth = MaterialImage(data.astype(np.float64))
        y = forward(model, geom, truth)
        y = apply_noise(replace(noise_cfg, seed=noise_cfg.seed.child(name)), y)
        pairs = precompute_pairs(
            model, geom, mcfg.scheme, y, mcfg.solver,
            cache_dir=cache_root, sample_id=name,
        )
        samples.append(_Sample(name=name, truth=truth, pairs=tuple(pairs)))
    return samples


def _mean_val_psnr(net_cfg, params, samples):
    by_material = np.zeros(len(MATERIAL_NAMES))
    for sample in samples:
        recon = infer_from_pairs(net_cfg, params, sample.pairs)
        rows = evaluate(recon, sample.truth)
        by_material += [rows[name]["psnr_db"] for name in MATERIAL_NAMES]
    return by_material / len(samples)


def train(
    mcfg: MethodConfig,
    data_dir,
    model: SpectralModel,
    geom: Geometry,
    noise_cfg: NoiseConfig,
    out_dir,
) -> TrainResult:
    """Run one training method end to end.

    Writes the best and final checkpoints plus the trace CSV under out_dir
    and returns the in-memory result.  Deterministic given the seeds in the
    configs: two runs into fresh directories produce identical bytes.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    splits = read_manifest(data_dir)
    cache_root = os.path.join(out_dir, CACHE_DIR)
    train_samples = _load_split(splits["train"], model, geom, mcfg, noise_cfg, cache_root)
    val_samples = _load_split(splits["val"], model, geom, mcfg, noise_cfg, cache_root)
    if not train_samples or not val_samples:
        raise ContractViolation("need at least one training and one validation sample")

    if mcfg.method == "xspace":
        loss_fn = lambda params, pairs: loss_x(mcfg.net, params, pairs)
    else:
        loss_fn = lambda params, pairs: loss_y(model, geom, mcfg.net, params, pairs)

    params = init_params(mcfg.net, mcfg.seed.child("init"))
    state = init_adam(params.size, lr=mcfg.lr)
    shuffle_rng = mcfg.seed.child("shuffle").generator() if mcfg.shuffle else None

    records = []

    def evaluate_epoch(epoch, mean_loss):
        stop = float(
            np.mean([early_stop_metric(mcfg.net, params, s.pairs) for s in val_samples])
        )
        water, iodine, gado = _mean_val_psnr(mcfg.net, params, val_samples)
        records.append(
            TrainRecord(
                epoch=epoch,
                loss=mean_loss,
                stop_metric=stop,
                psnr_iodine=float(iodine),
                psnr_gadolinium=float(gado),
                psnr_water=float(water),
            )
        )
        return stop

    loss0 = float(
        np.mean([loss_fn(params, s.pairs)[0] for s in train_samples])
    )
    best_metric = evaluate_epoch(0, loss0)
    best_epoch = 0
    best_params = params.copy()
    best_state = state
    epoch = 0
    diverged = False

    for epoch in range(1, mcfg.max_epochs + 1):
        order = np.arange(len(train_samples))
        if shuffle_rng is not None:
            shuffle_rng.shuffle(order)
        epoch_losses = []
        for idx in order:
            loss, grads = loss_fn(params, train_samples[idx].pairs)
            if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                log.warning(
                    "training diverged at epoch %d on sample %s (loss %.3g); "
                    "keeping the best checkpoint",
                    epoch, train_samples[idx].name, loss,
                )
                diverged = True
                break
            state, params = adam_step(state, params, grads)
            epoch_losses.append(loss)
        if diverged:
            break
        if epoch % mcfg.eval_interval == 0 or epoch == mcfg.max_epochs:
            metric = evaluate_epoch(epoch, float(np.mean(epoch_losses)))
            if metric > best_metric:
                best_metric = metric
                best_epoch = epoch
                best_params = params.copy()
                best_state = state
            elif epoch - best_epoch >= mcfg.patience:
                break

    save_checkpoint(os.path.join(out_dir, BEST_DIR), mcfg.net, best_params, best_state, best_epoch)
    save_checkpoint(os.path.join(out_dir, FINAL_DIR), mcfg.net, params, state, epoch)
    with open(os.path.join(out_dir, TRACE_FILE), "w") as fh:
        fh.write(trace_to_csv(records))
    return TrainResult(
        best_epoch=best_epoch,
        best_params=best_params,
        final_epoch=epoch,
        final_params=params,
        trace=tuple(records),
    )


def evaluate_split(
    params, net_cfg, mcfg, data_dir, split, model, geom, noise_cfg
):
    """Per-material mean PSNR of the trained network on one dataset split,
    with the same per-sample noise streams used at training time."""
    splits = read_manifest(data_dir)
    samples = _load_split(splits[split], model, geom, mcfg, noise_cfg, None)
    by_material = {name: [] for name in MATERIAL_NAMES}
    for sample in samples:
        recon = infer_from_pairs(net_cfg, params, sample.pairs)
        rows = evaluate(recon, sample.truth)
        for name in MATERIAL_NAMES:
            by_material[name].append(rows[name]["psnr_db"])
    return {name: float(np.mean(vals)) for name, vals in by_material.items()}
