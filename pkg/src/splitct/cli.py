"""Command-line pipeline: dataset generation, forward simulation, noise,
reconstruction, training, inference, evaluation, identity verification and
PGM rendering.

Configuration is a flat text file of `section.key = value` lines ('#' starts
a comment).  Every run resolves its configuration against built-in defaults
and echoes the result to effective_config.txt next to its outputs, so a run
can be reproduced from that file alone.  All randomness derives from
seed.master through fixed stream labels.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys

import numpy as np

from .core import (
    ContractViolation,
    MaterialImage,
    RngStream,
    SpectralSinogram,
    TensorFormatError,
    read_tensor,
    write_tensor,
)
from .metrics import MATERIAL_NAMES, evaluate, evaluate_csv
from .model import NetConfig, load_checkpoint
from .noise import NoiseConfig, apply_noise
from .partition import scheme_for_method
from .phantom import PhantomConfig, generate_dataset
from .radon import make_geometry
from .solver import DEFAULT_STEP, SolverConfig, cp_fast
from .spectral import build_default_model, forward
from .training import MethodConfig, infer, train
from .verify import pixel_parity_denoiser, verify_prop_noise2self, verify_theorem1

log = logging.getLogger(__name__)

EFFECTIVE_CONFIG = "effective_config.txt"

DEFAULTS = {
    "geometry.size": "64",
    "geometry.n_angles": "64",
    "spectral.E": "150",
    "spectral.B": "5",
    "spectral.M": "3",
    "noise.kind": "poisson_electronic",
    "noise.I0": "1e5",
    "noise.sigma_e": "1e-3",
    "noise.sigma_g": "0.01",
    "solver.iters": "200",
    "solver.step": repr(DEFAULT_STEP),
    "net.channels": "16",
    "train.max_epochs": "15000",
    "train.patience": "500",
    "train.eval_interval": "25",
    "train.lr": "1e-4",
    "seed.master": "0",
}


def parse_config(path=None) -> dict:
    """Read `section.key = value` lines over the defaults; unknown keys are
    rejected so typos fail loudly."""
    cfg = dict(DEFAULTS)
    if path is None:
        return cfg
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(
                    f"{path}:{lineno}: expected 'section.key = value', got {raw!r}"
                )
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ContractViolation(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = value
    return cfg


def config_text(cfg: dict) -> str:
    return "".join(f"{key} = {cfg[key]}\n" for key in sorted(cfg))


def _echo_config(cfg: dict, out_path: str) -> None:
    """Write the resolved configuration next to the command's outputs."""
    target = out_path if os.path.isdir(out_path) else os.path.dirname(out_path) or "."
    os.makedirs(target, exist_ok=True)
    with open(os.path.join(target, EFFECTIVE_CONFIG), "w") as fh:
        fh.write(config_text(cfg))


def _build_geometry(cfg):
    return make_geometry(int(cfg["geometry.size"]), int(cfg["geometry.n_angles"]))


def _build_spectral(cfg):
    return build_default_model(
        n_energies=int(cfg["spectral.E"]),
        n_bins=int(cfg["spectral.B"]),
        n_materials=int(cfg["spectral.M"]),
    )


def _build_noise(cfg):
    sigma_g = cfg["noise.sigma_g"]
    return NoiseConfig(
        kind=cfg["noise.kind"],
        i0=float(cfg["noise.I0"]),
        sigma_e=float(cfg["noise.sigma_e"]),
        sigma_g=float(sigma_g) if sigma_g else None,
        seed=RngStream(int(cfg["seed.master"]), "noise"),
    )


def _build_solver(cfg, record_residuals=False):
    return SolverConfig(
        n_iters=int(cfg["solver.iters"]),
        step=float(cfg["solver.step"]),
        record_residuals=record_residuals,
    )


def _read_image(path) -> MaterialImage:
    _, data = read_tensor(path)
    return MaterialImage(data.astype(np.float64))


def _read_sino(path) -> SpectralSinogram:
    _, data = read_tensor(path)
    return SpectralSinogram(data.astype(np.float64))


# -- subcommand handlers -------------------------------------------------------


def _cmd_dataset_gen(args):
    cfg = parse_config(args.config)
    phantom_cfg = PhantomConfig(
        size=int(cfg["geometry.size"]),
        contrast_scale=args.contrast_scale,
        deform_amplitude=args.deform,
        seed=RngStream(int(cfg["seed.master"]), "phantom"),
    )
    generate_dataset(
        phantom_cfg, args.n_train, args.n_val, args.n_test, args.out,
        overwrite=args.overwrite,
    )
    _echo_config(cfg, args.out)
    return 0


def _cmd_forward(args):
    cfg = parse_config(args.config)
    y = forward(_build_spectral(cfg), _build_geometry(cfg), _read_image(args.phantom))
    write_tensor(args.out, y.data)
    _echo_config(cfg, args.out)
    return 0


def _cmd_noise(args):
    cfg = parse_config(args.config)
    noisy = apply_noise(_build_noise(cfg), _read_sino(args.infile))
    write_tensor(args.out, noisy.data)
    _echo_config(cfg, args.out)
    return 0


def _cmd_reconstruct_cpfast(args):
    cfg = parse_config(args.config)
    solver_cfg = _build_solver(cfg, record_residuals=args.trace is not None)
    x, trace = cp_fast(
        _build_spectral(cfg), _build_geometry(cfg), _read_sino(args.sino), solver_cfg
    )
    write_tensor(args.out, x.data)
    if args.trace is not None:
        lines = ["iter,residual"]
        lines += [f"{k},{val:.12g}" for k, val in enumerate(trace)]
        with open(args.trace, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    _echo_config(cfg, args.out)
    return 0


def _cmd_train(args):
    cfg = parse_config(args.config)
    geom = _build_geometry(cfg)
    model = _build_spectral(cfg)
    method = args.method.replace("-", "_")
    mcfg = MethodConfig(
        method=method,
        scheme=scheme_for_method(method, geom, model.n_bins),
        solver=_build_solver(cfg),
        net=NetConfig(channels=int(cfg["net.channels"])),
        max_epochs=int(cfg["train.max_epochs"]),
        patience=int(cfg["train.patience"]),
        eval_interval=int(cfg["train.eval_interval"]),
        lr=float(cfg["train.lr"]),
        seed=RngStream(int(cfg["seed.master"]), "train"),
    )
    existed = os.path.isdir(args.out)
    try:
        train(mcfg, args.data, model, geom, _build_noise(cfg), args.out)
    except BaseException:
        if not existed and os.path.isdir(args.out):
            shutil.rmtree(args.out, ignore_errors=True)
        raise
    cfg_echo = dict(cfg)
    _echo_config(cfg_echo, args.out)
    with open(os.path.join(args.out, "method.txt"), "w") as fh:
        fh.write(method + "\n")
    return 0


def _cmd_infer(args):
    ckpt_cfg_path = os.path.join(args.ckpt, EFFECTIVE_CONFIG)
    run_dir = os.path.dirname(os.path.normpath(args.ckpt))
    if not os.path.exists(ckpt_cfg_path):
        ckpt_cfg_path = os.path.join(run_dir, EFFECTIVE_CONFIG)
    cfg = parse_config(ckpt_cfg_path)
    method_path = os.path.join(args.ckpt, "method.txt")
    if not os.path.exists(method_path):
        method_path = os.path.join(run_dir, "method.txt")
    with open(method_path) as fh:
        method = fh.read().strip()
    net_cfg, params, _, _ = load_checkpoint(args.ckpt)
    geom = _build_geometry(cfg)
    model = _build_spectral(cfg)
    recon = infer(
        params,
        net_cfg,
        model,
        geom,
        _read_sino(args.sino),
        scheme_for_method(method, geom, model.n_bins),
        _build_solver(cfg),
    )
    write_tensor(args.out, recon.data)
    return 0


def _cmd_eval(args):
    rows = evaluate(_read_image(args.recon), _read_image(args.truth))
    text = evaluate_csv(rows)
    with open(args.out, "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


def _cmd_verify(args):
    cfg = parse_config(args.config)
    master = int(cfg["seed.master"])
    size = int(cfg["geometry.size"])
    phantom_cfg = PhantomConfig(
        size=size, seed=RngStream(master, "verify/phantom")
    )
    from .phantom import generate_phantom

    x = generate_phantom(phantom_cfg)
    sigma = float(cfg["noise.sigma_g"])
    if args.which == "theorem1":
        geom = _build_geometry(cfg)
        model = _build_spectral(cfg)
        report = verify_theorem1(
            model,
            geom,
            scheme_for_method("double_split", geom, model.n_bins),
            x,
            lambda stack: stack,
            sigma,
            args.draws,
            RngStream(master, "verify/theorem1"),
            solver_cfg=SolverConfig(n_iters=min(int(cfg["solver.iters"]), 40),
                                    step=float(cfg["solver.step"])),
            noise_kind=cfg["noise.kind"],
        )
    else:
        report = verify_prop_noise2self(
            pixel_parity_denoiser(),
            x.data[0],
            sigma,
            args.draws,
            RngStream(master, "verify/noise2self"),
        )
    with open(args.out, "w") as fh:
        fh.write(report.to_csv())
    sys.stdout.write(str(report))
    return 0 if report.passed else 1


def render_pgm(channel: np.ndarray) -> bytes:
    """Encode one channel as a 16-bit binary PGM with the original value
    range recorded on the comment line."""
    lo = float(channel.min())
    hi = float(channel.max())
    if hi > lo:
        scaled = np.round((channel - lo) / (hi - lo) * 65535.0)
    else:
        scaled = np.zeros_like(channel)
    header = (
        f"P5\n# scale min={lo:.12g} max={hi:.12g}\n"
        f"{channel.shape[1]} {channel.shape[0]}\n65535\n"
    )
    return header.encode("ascii") + scaled.astype(">u2").tobytes()


def _cmd_render(args):
    _, data = read_tensor(args.infile)
    data = data.astype(np.float64)
    if data.ndim == 2:
        channels = {None: data}
    elif data.ndim == 3:
        names = (
            MATERIAL_NAMES
            if data.shape[0] == len(MATERIAL_NAMES)
            else [f"c{i}" for i in range(data.shape[0])]
        )
        channels = {name: plane for name, plane in zip(names, data)}
    else:
        raise ContractViolation(f"cannot render a {data.ndim}-d tensor")
    stem, ext = os.path.splitext(args.out)
    ext = ext or ".pgm"
    for name, plane in channels.items():
        path = args.out if name is None else f"{stem}_{name}{ext}"
        with open(path, "wb") as fh:
            fh.write(render_pgm(plane))
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitct",
        description="multispectral tomography with self-supervised splitting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_dataset = sub.add_parser("dataset", help="dataset creation")
    dsub = p_dataset.add_subparsers(dest="subcommand", required=True)
    p_gen = dsub.add_parser("gen", help="generate a phantom dataset")
    p_gen.add_argument("--config")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--n-train", type=int, default=60)
    p_gen.add_argument("--n-val", type=int, default=20)
    p_gen.add_argument("--n-test", type=int, default=20)
    p_gen.add_argument("--contrast-scale", type=float, default=0.05)
    p_gen.add_argument("--deform", type=float, default=0.15)
    p_gen.add_argument("--overwrite", action="store_true")
    p_gen.set_defaults(func=_cmd_dataset_gen, outputs=["out"])

    p_fwd = sub.add_parser("forward", help="clean spectral sinogram of a phantom")
    p_fwd.add_argument("--config")
    p_fwd.add_argument("--phantom", required=True)
    p_fwd.add_argument("--out", required=True)
    p_fwd.set_defaults(func=_cmd_forward, outputs=["out"])

    p_noise = sub.add_parser("noise", help="apply the measurement noise model")
    p_noise.add_argument("--config")
    p_noise.add_argument("--in", dest="infile", required=True)
    p_noise.add_argument("--out", required=True)
    p_noise.set_defaults(func=_cmd_noise, outputs=["out"])

    p_rec = sub.add_parser("reconstruct", help="classical reconstruction")
    rsub = p_rec.add_subparsers(dest="subcommand", required=True)
    p_cpf = rsub.add_parser("cpfast", help="preconditioned log-domain iteration")
    p_cpf.add_argument("--config")
    p_cpf.add_argument("--sino", required=True)
    p_cpf.add_argument("--out", required=True)
    p_cpf.add_argument("--trace")
    p_cpf.set_defaults(func=_cmd_reconstruct_cpfast, outputs=["out", "trace"])

    p_train = sub.add_parser("train", help="train a self-supervised method")
    p_train.add_argument(
        "--method",
        required=True,
        choices=["xspace", "single-split", "double-split"],
    )
    p_train.add_argument("--config")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=_cmd_train, outputs=["out"])

    p_inf = sub.add_parser("infer", help="reconstruct with a trained checkpoint")
    p_inf.add_argument("--ckpt", required=True)
    p_inf.add_argument("--sino", required=True)
    p_inf.add_argument("--out", required=True)
    p_inf.set_defaults(func=_cmd_infer, outputs=["out"])

    p_eval = sub.add_parser("eval", help="PSNR/SSIM against ground truth")
    p_eval.add_argument("--recon", required=True)
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=_cmd_eval, outputs=["out"])

    p_ver = sub.add_parser("verify", help="Monte Carlo identity checks")
    p_ver.add_argument("which", choices=["theorem1", "noise2self"])
    p_ver.add_argument("--config")
    p_ver.add_argument("--out", required=True)
    p_ver.add_argument("--draws", type=int, default=200)
    p_ver.set_defaults(func=_cmd_verify, outputs=["out"])

    p_rnd = sub.add_parser("render", help="render a tensor to 16-bit PGM")
    p_rnd.add_argument("--in", dest="infile", required=True)
    p_rnd.add_argument("--out", required=True)
    p_rnd.set_defaults(func=_cmd_render, outputs=["out"])

    return parser


def _cleanup_outputs(args) -> None:
    for name in getattr(args, "outputs", []):
        path = getattr(args, name, None)
        if path and os.path.isfile(path):
            try:
                os.remove(path)
            except OSError:
                pass


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractViolation, TensorFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _cleanup_outputs(args)
        return 1


if __name__ == "__main__":
    sys.exit(main())
