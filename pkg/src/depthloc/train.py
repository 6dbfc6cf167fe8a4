"""Training: losses with analytic gradients, Adam, and checkpoint I/O.

The objective is a weighted sum of a soft Dice loss on sigmoid
probabilities and a binary cross-entropy evaluated directly from logits in
the numerically stable form ``max(z, 0) - z*g + log(1 + exp(-|z|))``. The
gradient with respect to the logits is computed in closed form; no
automatic differentiation is involved anywhere.

The learning rate follows a cosine decay from the base rate to
``eta_min`` over the configured number of steps, and updates use
bias-corrected Adam. Batch composition is driven by a seeded permutation
stream, so a fixed configuration reproduces training bit for bit.

Checkpoint format (``.dckp``, little-endian): magic ``DCKP``, version u8
(=1), architecture block (levels u8, one u16 channel width per level,
input dims 2*u32 as height and width, output channels u8), tensor count
u32, then per tensor a u16 name length, the UTF-8 name, ndim u8, ndim*u32
dims, and a float32 payload. A u8 flag marks whether optimizer moments
follow (first and second moment per tensor, in tensor order), then a u64
step counter and a u16-length-prefixed UTF-8 configuration digest.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .net import ArchSpec, NetworkParams, backward, forward, init_params, param_names
from .voldata import (
    GridInvariantError,
    TruncatedPayloadError,
    _Reader,
)

#: Reference batch size for full-scale runs; the package default below is
#: sized for a small desk run instead.
REFERENCE_BATCH_SIZE = 16


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; the message names the failing step."""


class ConfigError(ValueError):
    """A training configuration value is out of range."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for :func:`train_loop`."""

    batch_size: int = 8
    total_steps: int = 500
    base_lr: float = 2e-3
    eta_min: float = 0.0
    dice_weight: float = 0.5
    bce_weight: float = 0.5
    dice_epsilon: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if self.base_lr <= 0 or not math.isfinite(self.base_lr):
            raise ConfigError("base_lr must be positive and finite")
        if self.eta_min < 0 or self.eta_min > self.base_lr:
            raise ConfigError("eta_min must lie in [0, base_lr]")
        if self.dice_weight < 0 or self.bce_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.dice_weight + self.bce_weight <= 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.dice_epsilon <= 0:
            raise ConfigError("dice_epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")


def dice_loss(probs, targets, epsilon=1.0):
    """Soft Dice loss, averaged over batch and channel.

    For each (batch, channel) pair: ``1 - (2*sum(p*g) + eps) /
    (sum(p) + sum(g) + eps)`` summed over pixels. The epsilon keeps empty
    targets well-defined and pushes empty-target channels toward empty
    predictions.
    """

    probs = np.asarray(probs)
    targets = np.asarray(targets)
    if probs.ndim != 4 or probs.shape != targets.shape:
        raise GridInvariantError("dice_loss expects matching (B, C, H, W) arrays")
    inter = (probs * targets).sum(axis=(2, 3))
    sums = probs.sum(axis=(2, 3)) + targets.sum(axis=(2, 3))
    return float(np.mean(1.0 - (2.0 * inter + epsilon) / (sums + epsilon)))


def bce_loss(logits, targets):
    """Mean binary cross-entropy from logits, numerically stable."""

    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.shape != targets.shape:
        raise GridInvariantError("bce_loss expects matching arrays")
    elem = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return float(elem.mean())


@dataclass(frozen=True, eq=False)
class LossValues:
    total: float
    dice: float
    bce: float
    grad_logits: np.ndarray


#: Gradient entries below this are flushed to exact zeros. Saturated pixels
#: otherwise leave denormal floats that stall the matmul backward path, and
#: anything this far below the working f32 gradient scale is pure noise.
_GRAD_FLUSH = 1e-30


def combined_loss(logits, targets, config):
    """Weighted Dice + BCE with its exact gradient at the logits."""

    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.ndim != 4 or logits.shape != targets.shape:
        raise GridInvariantError("combined_loss expects matching (B, C, H, W) arrays")
    b, c, h, w = logits.shape
    eps = config.dice_epsilon

    probs = expit(logits)
    inter = (probs * targets).sum(axis=(2, 3))
    num = 2.0 * inter + eps
    den = probs.sum(axis=(2, 3)) + targets.sum(axis=(2, 3)) + eps
    dice = float(np.mean(1.0 - num / den))
    bce_elem = (
        np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    )
    bce = float(bce_elem.mean())
    total = config.dice_weight * dice + config.bce_weight * bce

    # d(dice)/d(p_i) for one (b, c): (num - 2*g_i*den) / den^2, then / (B*C)
    num_e = num[:, :, None, None]
    den_e = den[:, :, None, None]
    ddice_dp = (num_e - 2.0 * targets * den_e) / (den_e * den_e * (b * c))
    grad = config.dice_weight * ddice_dp * probs * (1.0 - probs)
    grad += config.bce_weight * (probs - targets) / logits.size
    grad[np.abs(grad) < _GRAD_FLUSH] = 0.0
    return LossValues(total=total, dice=dice, bce=bce, grad_logits=grad)


def cosine_lr(step, total_steps, base_lr, eta_min=0.0):
    """Cosine decay from ``base_lr`` at step 0 to ``eta_min`` at ``total_steps``."""

    if total_steps < 1:
        raise ConfigError("total_steps must be positive")
    if step < 0 or step > total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Adam moments per parameter and the number of applied updates."""

    m: dict
    v: dict
    step: int


def init_optimizer(params):
    zeros = {k: np.zeros_like(t) for k, t in params.tensors.items()}
    return OptimizerState(
        m=zeros, v={k: np.zeros_like(t) for k, t in params.tensors.items()}, step=0
    )


def adam_step(params, grads, state, lr, config):
    """One bias-corrected Adam update; returns new params and state."""

    if set(grads) != set(params.tensors):
        raise GridInvariantError("gradient names do not match parameters")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_t, new_m, new_v = {}, {}, {}
    for k, theta in params.tensors.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        new_t[k] = theta - lr * update
        new_m[k] = m
        new_v[k] = v
    return NetworkParams(params.arch, new_t), OptimizerState(new_m, new_v, t)


@dataclass(frozen=True)
class TrainLogRow:
    step: int
    lr: float
    loss_total: float
    loss_dice: float
    loss_bce: float


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: NetworkParams
    opt_state: OptimizerState
    log: list


def train_loop(inputs, targets, config, arch=None, params=None, on_step=None):
    """Train on (inputs, targets) and return params, state, and a step log.

    inputs: (N, H, W) float depth images; targets: (N, C, H, W) binary
    masks. Batches follow a seeded permutation that reshuffles each epoch;
    leftover cases smaller than one batch are carried to the reshuffle.
    Raises :class:`TrainingDivergedError` when the loss stops being finite.
    """

    inputs = np.asarray(inputs, dtype=np.float32)
    targets = np.asarray(targets)
    if inputs.ndim != 3 or targets.ndim != 4 or targets.shape[0] != inputs.shape[0]:
        raise GridInvariantError("expected inputs (N, H, W) and targets (N, C, H, W)")
    if targets.shape[2:] != inputs.shape[1:]:
        raise GridInvariantError("input and target grids disagree")
    n = inputs.shape[0]
    if n < config.batch_size:
        raise ConfigError(f"dataset of {n} cases is smaller than one batch")

    if params is None:
        if arch is None:
            arch = ArchSpec(input_hw=inputs.shape[1:], n_out=targets.shape[1])
        params = init_params(arch, config.rng_seed)
    arch = params.arch
    if arch.input_hw != inputs.shape[1:] or arch.n_out != targets.shape[1]:
        raise GridInvariantError("data shapes do not match the architecture")

    rng = np.random.default_rng(config.rng_seed)
    state = init_optimizer(params)
    order = rng.permutation(n)
    pos = 0
    log = []
    for step in range(config.total_steps):
        if pos + config.batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + config.batch_size]
        pos += config.batch_size
        batch_x = inputs[idx]
        batch_g = targets[idx].astype(np.float32)

        logits, trace = forward(params, batch_x)
        loss = combined_loss(logits, batch_g, config)
        if not math.isfinite(loss.total):
            raise TrainingDivergedError(
                f"loss became non-finite at step {step}; aborting"
            )
        grads = backward(params, trace, loss.grad_logits)
        lr = cosine_lr(step, config.total_steps, config.base_lr, config.eta_min)
        params, state = adam_step(params, grads, state, lr, config)
        row = TrainLogRow(step, lr, loss.total, loss.dice, loss.bce)
        log.append(row)
        if on_step is not None:
            on_step(row)
    return TrainResult(params=params, opt_state=state, log=log)


def mean_mask_baseline(targets):
    """Per-organ mean mask over the training set, thresholded at 0.5.

    A training-free reference predictor: channel c of the result is 1
    where more than half of the training cases have channel c set.
    """

    targets = np.asarray(targets)
    if targets.ndim != 4:
        raise GridInvariantError("expected targets (N, C, H, W)")
    return (targets.astype(np.float64).mean(axis=0) > 0.5).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Trained parameters plus provenance for resuming or evaluating."""

    params: NetworkParams
    opt_state: OptimizerState | None
    step: int
    config_digest: str


def save_checkpoint(path, checkpoint):
    """Write a checkpoint; tensors are stored float32 in canonical order."""

    params = checkpoint.params
    arch = params.arch
    if checkpoint.opt_state is not None and checkpoint.opt_state.step != checkpoint.step:
        raise GridInvariantError("optimizer step disagrees with checkpoint step")
    if any(c > 0xFFFF for c in arch.channels):
        raise GridInvariantError("channel width too large for the format")

    parts = [b"DCKP", struct.pack("<BB", 1, arch.levels)]
    parts.append(struct.pack(f"<{arch.levels}H", *arch.channels))
    parts.append(struct.pack("<2IB", *arch.input_hw, arch.n_out))

    names = param_names(arch)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        tensor = np.ascontiguousarray(params.tensors[name], dtype=np.float32)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.tobytes())

    opt = checkpoint.opt_state
    parts.append(struct.pack("<B", 0 if opt is None else 1))
    if opt is not None:
        for name in names:
            for moments in (opt.m, opt.v):
                arr = np.ascontiguousarray(moments[name], dtype=np.float32)
                if arr.shape != params.tensors[name].shape:
                    raise GridInvariantError(f"moment shape mismatch for {name}")
                parts.append(arr.tobytes())
    parts.append(struct.pack("<Q", checkpoint.step))
    digest = checkpoint.config_digest.encode("utf-8")
    parts.append(struct.pack("<H", len(digest)))
    parts.append(digest)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    r = _Reader(path)
    r.expect_magic(b"DCKP")
    r.expect_version()
    (levels,) = r.unpack("<B")
    channels = r.unpack(f"<{levels}H")
    h, w, n_out = r.unpack("<2IB")
    arch = ArchSpec(levels=levels, channels=channels, input_hw=(h, w), n_out=n_out)

    (n_tensors,) = r.unpack("<I")
    tensors = {}
    order = []
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = r.array("<f4", count).reshape(shape)
        order.append(name)
    if order != param_names(arch):
        raise GridInvariantError(f"{path}: tensors are not in canonical order")
    params = NetworkParams(arch, tensors)

    (has_opt,) = r.unpack("<B")
    opt_state = None
    if has_opt == 1:
        m, v = {}, {}
        for name in order:
            count = int(params.tensors[name].size)
            m[name] = r.array("<f4", count).reshape(params.tensors[name].shape)
            v[name] = r.array("<f4", count).reshape(params.tensors[name].shape)
    elif has_opt != 0:
        raise TruncatedPayloadError(f"{path}: invalid optimizer flag {has_opt}")
    (step,) = r.unpack("<Q")
    if has_opt == 1:
        opt_state = OptimizerState(m=m, v=v, step=step)
    (digest_len,) = r.unpack("<H")
    digest = r.take(digest_len).decode("utf-8")
    r.finish()
    return Checkpoint(params=params, opt_state=opt_state, step=step, config_digest=digest)
