"""Small two-scale encoder-decoder applied per image channel, with
hand-written reverse-mode gradients and a functional Adam optimizer.

The fixed architecture is

    conv(1->C) + rect -> conv(C->C) + rect          (full resolution)
    -> avgpool 2x2
    -> conv(C->2C) + rect -> conv(2C->2C) + rect    (half resolution)
    -> nearest upsample 2x
    -> concat with the pre-pool features (3C channels)
    -> conv(3C->C) + rect -> conv(C->1)
    -> plus the input when the residual skip is on.

All convolutions are 3x3, zero-padded, stride 1.  Parameters live in one flat
float64 vector with the layout conv1 kernel, conv1 bias, conv2 kernel, ...,
conv6 bias.  Convolutions run as im2col matrix products; the patch matrices
are kept on the tape and reused for the kernel gradients.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ContractViolation, RngStream, read_tensor, write_tensor

PARAMS_FILE = "params.tf"
ADAM_FILE = "adam.tf"
META_FILE = "meta.txt"


@dataclass(frozen=True)
class NetConfig:
    channels: int = 16
    residual: bool = True

    def __post_init__(self):
        if self.channels < 1:
            raise ContractViolation("need at least one base channel")


def layer_shapes(cfg: NetConfig) -> tuple:
    """(out_channels, in_channels) of the six convolutions, in order."""
    c = cfg.channels
    return ((c, 1), (c, c), (2 * c, c), (2 * c, 2 * c), (c, 3 * c), (1, c))


def param_count(cfg: NetConfig) -> int:
    return sum(o * i * 9 + o for o, i in layer_shapes(cfg))


def unpack_params(params: np.ndarray, cfg: NetConfig) -> list:
    """Views into the flat vector as [(kernel (o,i,3,3), bias (o,)), ...]."""
    if params.shape != (param_count(cfg),):
        raise ContractViolation(
            f"parameter vector has {params.size} entries, "
            f"config needs {param_count(cfg)}"
        )
    layers = []
    at = 0
    for o, i in layer_shapes(cfg):
        k = params[at : at + o * i * 9].reshape(o, i, 3, 3)
        at += o * i * 9
        b = params[at : at + o]
        at += o
        layers.append((k, b))
    return layers


def init_params(cfg: NetConfig, seed: RngStream) -> np.ndarray:
    """Uniform kernels scaled so the per-layer std is sqrt(2/fan_in); zero
    biases."""
    rng = seed.generator()
    parts = []
    for o, i in layer_shapes(cfg):
        bound = math.sqrt(6.0 / (i * 9))
        parts.append(rng.uniform(-bound, bound, size=o * i * 9))
        parts.append(np.zeros(o))
    return np.concatenate(parts)


def config_hash(cfg: NetConfig) -> str:
    text = f"channels={cfg.channels};residual={int(cfg.residual)}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- convolution primitives ---------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*9) patch matrix under zero padding 1."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _conv_forward(x, kernel, bias):
    n, _, h, w = x.shape
    o = kernel.shape[0]
    col = _im2col(x)
    out = col @ kernel.reshape(o, -1).T
    out += bias
    return out.reshape(n, h, w, o).transpose(0, 3, 1, 2), col


def _conv_backward(col, in_channels, kernel, grad_out):
    n, o, h, w = grad_out.shape
    gmat = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, o)
    gk = (gmat.T @ col).reshape(kernel.shape)
    gb = gmat.sum(axis=0)
    # input gradient = grad_out correlated with the spatially flipped kernel,
    # in/out channels swapped
    gcol = _im2col(grad_out)
    kflip = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(in_channels, o * 9)
    gx = (gcol @ kflip.T).reshape(n, h, w, in_channels).transpose(0, 3, 1, 2)
    return gk, gb, gx


def _avgpool2(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample2_backward(g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# -- network ------------------------------------------------------------------


def net_forward_batch(params, cfg: NetConfig, imgs):
    """Apply the network to a stack of single-channel images.

    imgs: (N, H, W) with H, W even.  Returns ((N, H, W) outputs, tape); the
    tape carries everything net_backward_batch needs.
    """
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim != 3:
        raise ContractViolation("expected a stack of single-channel images")
    _, h, w = imgs.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"image sides must be even, got {h}x{w}")
    (k1, b1), (k2, b2), (k3, b3), (k4, b4), (k5, b5), (k6, b6) = unpack_params(
        params, cfg
    )
    a0 = imgs[:, np.newaxis]
    z1, col1 = _conv_forward(a0, k1, b1)
    a1 = np.maximum(z1, 0.0)
    z2, col2 = _conv_forward(a1, k2, b2)
    a2 = np.maximum(z2, 0.0)
    pooled = _avgpool2(a2)
    z3, col3 = _conv_forward(pooled, k3, b3)
    a3 = np.maximum(z3, 0.0)
    z4, col4 = _conv_forward(a3, k4, b4)
    a4 = np.maximum(z4, 0.0)
    up = _upsample2(a4)
    cat = np.concatenate([up, a2], axis=1)
    z5, col5 = _conv_forward(cat, k5, b5)
    a5 = np.maximum(z5, 0.0)
    z6, col6 = _conv_forward(a5, k6, b6)
    out = z6 + a0 if cfg.residual else z6
    tape = {
        "params": params,
        "cfg": cfg,
        "shape": imgs.shape,
        "cols": (col1, col2, col3, col4, col5, col6),
        "masks": (z1 > 0, z2 > 0, z3 > 0, z4 > 0, z5 > 0),
    }
    return out[:, 0], tape


def net_backward_batch(params, cfg: NetConfig, tape, grad_out):
    """Reverse-mode pass matching net_forward_batch.

    grad_out: (N, H, W).  Returns (flat parameter gradient summed over the
    batch, (N, H, W) input gradient).
    """
    if tape["cfg"] != cfg or tape["params"] is not params and not np.array_equal(
        tape["params"], params
    ):
        raise ContractViolation("tape does not match these parameters")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != tape["shape"]:
        raise ContractViolation(
            f"gradient shape {grad_out.shape} does not match forward shape "
            f"{tape['shape']}"
        )
    layers = unpack_params(params, cfg)
    (k1, _), (k2, _), (k3, _), (k4, _), (k5, _), (k6, _) = layers
    col1, col2, col3, col4, col5, col6 = tape["cols"]
    m1, m2, m3, m4, m5 = tape["masks"]
    c = cfg.channels

    g = grad_out[:, np.newaxis]
    gk6, gb6, g5 = _conv_backward(col6, c, k6, g)
    g5 *= m5
    gk5, gb5, gcat = _conv_backward(col5, 3 * c, k5, g5)
    gup = gcat[:, : 2 * c]
    ga2 = gcat[:, 2 * c :].copy()
    g4 = _upsample2_backward(gup)
    g4 *= m4
    gk4, gb4, g3 = _conv_backward(col4, 2 * c, k4, g4)
    g3 *= m3
    gk3, gb3, gpool = _conv_backward(col3, c, k3, g3)
    ga2 += _avgpool2_backward(gpool)
    ga2 *= m2
    gk2, gb2, g1 = _conv_backward(col2, c, k2, ga2)
    g1 *= m1
    gk1, gb1, g0 = _conv_backward(col1, 1, k1, g1)
    if cfg.residual:
        g0 = g0 + g
    grads = np.concatenate(
        [
            gk1.ravel(), gb1, gk2.ravel(), gb2, gk3.ravel(), gb3,
            gk4.ravel(), gb4, gk5.ravel(), gb5, gk6.ravel(), gb6,
        ]
    )
    return grads, g0[:, 0]


def net_forward(params, cfg: NetConfig, img):
    """Single-image wrapper: (H, W) in, ((H, W), tape) out."""
    out, tape = net_forward_batch(params, cfg, np.asarray(img)[np.newaxis])
    return out[0], tape


def net_backward(params, cfg: NetConfig, tape, grad_out):
    grads, gin = net_backward_batch(
        params, cfg, tape, np.asarray(grad_out)[np.newaxis]
    )
    return grads, gin[0]


# -- optimizer ----------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise ContractViolation("moment vectors must have equal shapes")
        if np.any(self.v < 0):
            raise ContractViolation("second moments must be nonnegative")


def init_adam(n_params: int, lr: float = 1e-4) -> AdamState:
    return AdamState(m=np.zeros(n_params), v=np.zeros(n_params), lr=lr)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update; returns (new state, new params)."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or grads.shape != state.m.shape:
        raise ContractViolation("params, grads and optimizer state disagree in size")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise ContractViolation(f"non-finite gradient at parameter index {bad}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), new_params


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(ckpt_dir, cfg: NetConfig, params, state: AdamState, epoch: int):
    """Write params + optimizer moments as tensors and a small text metadata
    file (epoch, step count, hyperparameters, config hash)."""
    os.makedirs(ckpt_dir, exist_ok=True)
    write_tensor(os.path.join(ckpt_dir, PARAMS_FILE), params)
    write_tensor(os.path.join(ckpt_dir, ADAM_FILE), np.stack([state.m, state.v]))
    lines = [
        f"epoch = {epoch}",
        f"t = {state.t}",
        f"lr = {state.lr!r}",
        f"channels = {cfg.channels}",
        f"residual = {int(cfg.residual)}",
        f"config_hash = {config_hash(cfg)}",
    ]
    with open(os.path.join(ckpt_dir, META_FILE), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(ckpt_dir):
    """Read a checkpoint directory; returns (cfg, params, AdamState, epoch)."""
    meta = {}
    with open(os.path.join(ckpt_dir, META_FILE)) as fh:
        for line in fh:
            if "=" in line:
                key, value = line.split("=", 1)
                meta[key.strip()] = value.strip()
    cfg = NetConfig(channels=int(meta["channels"]), residual=bool(int(meta["residual"])))
    if meta["config_hash"] != config_hash(cfg):
        raise ContractViolation("checkpoint metadata hash does not match its config")
    _, params = read_tensor(os.path.join(ckpt_dir, PARAMS_FILE))
    params = params.astype(np.float64)
    if params.shape != (param_count(cfg),):
        raise ContractViolation("checkpoint parameter count does not match config")
    _, mv = read_tensor(os.path.join(ckpt_dir, ADAM_FILE))
    mv = mv.astype(np.float64)
    state = AdamState(m=mv[0], v=mv[1], t=int(meta["t"]), lr=float(meta["lr"]))
    return cfg, params, state, int(meta["epoch"])
