"""A small fixed encoder-decoder network with hand-written backpropagation.

Architecture: ``levels`` encoder stages of two 3x3 convolutions (zero
padding 1, ReLU) with 2x2 max pooling between stages, then a mirrored
decoder that nearest-neighbour upsamples by 2, concatenates the matching
encoder activation, and applies two 3x3 convolutions; a final 1x1
convolution maps to one logit channel per organ. No framework is used:
forward and backward passes are explicit numpy.

Internals run channels-last (batch, height, width, channel). Convolutions
are evaluated as a single GEMM over im2col patches; the patch matrix is
kept on the forward trace so the weight gradient is one GEMM with no
repacking, and the input gradient accumulates nine shifted GEMMs, which
avoids building a second patch matrix. The public logits layout is
(batch, channel, height, width).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .voldata import ORGAN_NAMES, DepthImage, GridInvariantError, MaskStack

#: Depth images enter the network as a single channel.
INPUT_CHANNELS = 1


class ArchError(ValueError):
    """An architecture description is internally inconsistent."""


class ShapeError(ValueError):
    """An input array does not match the architecture."""


@dataclass(frozen=True)
class ArchSpec:
    """Network shape: per-level channel widths and the nominal input size.

    ``input_hw`` is (height, width) of the depth image; both must be
    divisible by ``2 ** (levels - 1)`` so pooling stays exact.
    """

    levels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    input_hw: tuple[int, int] = (192, 96)
    n_out: int = len(ORGAN_NAMES)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "input_hw", tuple(int(d) for d in self.input_hw))
        if self.levels < 2:
            raise ArchError("need at least two levels for an encoder-decoder")
        if len(self.channels) != self.levels:
            raise ArchError("need one channel width per level")
        if any(c < 1 for c in self.channels):
            raise ArchError("channel widths must be positive")
        if self.n_out < 1:
            raise ArchError("need at least one output channel")
        down = 2 ** (self.levels - 1)
        h, w = self.input_hw
        if h < down or w < down or h % down or w % down:
            raise ArchError(
                f"input {self.input_hw} is not divisible by the "
                f"pooling factor {down}"
            )


def _layer_plan(arch):
    """Ordered conv layers: (name, kernel, c_in, c_out)."""

    plan = []
    for lv in range(arch.levels):
        c_in = INPUT_CHANNELS if lv == 0 else arch.channels[lv - 1]
        c_out = arch.channels[lv]
        plan.append((f"enc{lv}_conv1", 3, c_in, c_out))
        plan.append((f"enc{lv}_conv2", 3, c_out, c_out))
    for lv in reversed(range(arch.levels - 1)):
        c_in = arch.channels[lv + 1] + arch.channels[lv]
        c_out = arch.channels[lv]
        plan.append((f"dec{lv}_conv1", 3, c_in, c_out))
        plan.append((f"dec{lv}_conv2", 3, c_out, c_out))
    plan.append(("out", 1, arch.channels[0], arch.n_out))
    return plan


def param_names(arch):
    """Canonical parameter order; also the checkpoint tensor order."""

    names = []
    for name, _, _, _ in _layer_plan(arch):
        names.append(f"{name}_w")
        names.append(f"{name}_b")
    return names


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """Architecture plus one tensor per parameter name."""

    arch: ArchSpec
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = {}
        for name, k, c_in, c_out in _layer_plan(self.arch):
            expected[f"{name}_w"] = (k, k, c_in, c_out)
            expected[f"{name}_b"] = (c_out,)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ArchError(f"parameter names mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ArchError(
                    f"{name}: expected shape {shape}, got {self.tensors[name].shape}"
                )

    def astype(self, dtype):
        return NetworkParams(
            self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )


def n_parameters(params):
    return sum(int(t.size) for t in params.tensors.values())


def init_params(arch, rng_seed, dtype=np.float32):
    """Fan-in scaled uniform weights, zero biases, deterministic in the seed.

    Weight entries are drawn from U(-b, b) with b = sqrt(6 / fan_in),
    fan_in = k*k*c_in, in canonical parameter order.
    """

    rng = np.random.default_rng(rng_seed)
    tensors = {}
    for name, k, c_in, c_out in _layer_plan(arch):
        bound = np.sqrt(6.0 / (k * k * c_in))
        tensors[f"{name}_w"] = rng.uniform(-bound, bound, (k, k, c_in, c_out)).astype(dtype)
        tensors[f"{name}_b"] = np.zeros(c_out, dtype=dtype)
    return NetworkParams(arch, tensors)


@dataclass(eq=False)
class ForwardTrace:
    """Intermediate state of one forward pass, consumed by :func:`backward`."""

    arch: ArchSpec
    batch: int
    entries: list = field(default_factory=list)


def _im2col3(x):
    """Patch matrix for a same-padded 3x3 convolution.

    x: (B, H, W, C) -> (B*H*W, 9*C), rows ordered (b, h, w), columns
    ordered (ki, kj, c) to match ``w.reshape(9 * c_in, c_out)``.
    """

    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1 : h + 1, 1 : w + 1] = x
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)


def _shift_slices(dh, dw, h, w):
    dst = (slice(max(0, dh), h + min(0, dh)), slice(max(0, dw), w + min(0, dw)))
    src = (slice(max(0, -dh), h + min(0, -dh)), slice(max(0, -dw), w + min(0, -dw)))
    return dst, src


def _conv3_input_grad(gy, w):
    """Input gradient of a same-padded 3x3 conv as nine shifted GEMMs."""

    b, h, wd, c_out = gy.shape
    c_in = w.shape[2]
    gym = gy.reshape(-1, c_out)
    gx = np.zeros((b, h, wd, c_in), dtype=gy.dtype)
    for i in range(3):
        for j in range(3):
            t = (gym @ w[i, j].T).reshape(b, h, wd, c_in)
            # output position p feeds input position p + (i - 1) via w[i, j]
            dst, src = _shift_slices(i - 1, j - 1, h, wd)
            gx[:, dst[0], dst[1]] += t[:, src[0], src[1]]
    return gx


def _pool2_forward(x):
    b, h, w, c = x.shape
    xr = (
        x.reshape(b, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, h // 2, w // 2, 4, c)
    )
    idx = xr.argmax(axis=3)
    y = np.take_along_axis(xr, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return y, idx.astype(np.uint8)


def _pool2_backward(g, idx):
    b, h2, w2, c = g.shape
    gr = np.zeros((b, h2, w2, 4, c), dtype=g.dtype)
    np.put_along_axis(gr, idx.astype(np.intp)[:, :, :, None, :], g[:, :, :, None, :], axis=3)
    return (
        gr.reshape(b, h2, w2, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, 2 * h2, 2 * w2, c)
    )


def _upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample2_backward(g):
    b, h, w, c = g.shape
    return g.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def _conv_block(params, trace, x, name, relu=True):
    w = params.tensors[f"{name}_w"]
    bias = params.tensors[f"{name}_b"]
    b, h, wd, _ = x.shape
    if w.shape[0] == 1:
        cols = x.reshape(b * h * wd, -1)
    else:
        cols = _im2col3(x)
    y = cols @ w.reshape(-1, w.shape[3])
    y += bias
    y = y.reshape(b, h, wd, w.shape[3])
    if relu:
        np.maximum(y, 0.0, out=y)
    trace.entries.append(("conv", name, cols, y if relu else None))
    return y


def forward(params, x):
    """Run the network on a batch of depth images.

    x: float array (B, H, W) matching ``arch.input_hw``. Returns
    ``(logits, trace)`` with logits shaped (B, n_out, H, W).
    """

    arch = params.arch
    x = np.asarray(x)
    if x.ndim != 3 or (x.shape[1], x.shape[2]) != arch.input_hw:
        raise ShapeError(
            f"expected input (B, {arch.input_hw[0]}, {arch.input_hw[1]}), "
            f"got {x.shape}"
        )
    dtype = params.tensors["out_w"].dtype
    h = x.astype(dtype, copy=False)[..., None]
    trace = ForwardTrace(arch=arch, batch=x.shape[0])

    skips = {}
    for lv in range(arch.levels):
        h = _conv_block(params, trace, h, f"enc{lv}_conv1")
        h = _conv_block(params, trace, h, f"enc{lv}_conv2")
        if lv < arch.levels - 1:
            skips[lv] = h
            trace.entries.append(("skip", lv))
            h, idx = _pool2_forward(h)
            trace.entries.append(("pool", idx))
    for lv in reversed(range(arch.levels - 1)):
        h = _upsample2(h)
        trace.entries.append(("up",))
        h = np.concatenate([h, skips[lv]], axis=3)
        trace.entries.append(("concat", lv, h.shape[3] - skips[lv].shape[3]))
        h = _conv_block(params, trace, h, f"dec{lv}_conv1")
        h = _conv_block(params, trace, h, f"dec{lv}_conv2")
    logits_cl = _conv_block(params, trace, h, "out", relu=False)
    return np.ascontiguousarray(logits_cl.transpose(0, 3, 1, 2)), trace


def backward(params, trace, grad_logits):
    """Parameter gradients for a traced forward pass.

    grad_logits: (B, n_out, H, W), the loss gradient at the logits.
    Returns a dict with one gradient per parameter name. ReLU uses the
    zero subgradient at 0.
    """

    arch = params.arch
    grad_logits = np.asarray(grad_logits)
    expected = (trace.batch, arch.n_out) + arch.input_hw
    if grad_logits.shape != expected:
        raise ShapeError(f"expected grad shape {expected}, got {grad_logits.shape}")

    grads = {}
    g = np.ascontiguousarray(grad_logits.transpose(0, 2, 3, 1))
    skip_grads = {}
    first = trace.entries[0]
    for entry in reversed(trace.entries):
        kind = entry[0]
        if kind == "conv":
            _, name, cols, relu_y = entry
            w = params.tensors[f"{name}_w"]
            if relu_y is not None:
                # g is always freshly allocated here, safe to mask in place
                np.multiply(g, relu_y > 0, out=g)
            gym = g.reshape(-1, g.shape[3])
            grads[f"{name}_w"] = (cols.T @ gym).reshape(w.shape)
            grads[f"{name}_b"] = gym.sum(axis=0)
            if entry is first:
                break  # the input gradient of the first conv is never used
            if w.shape[0] == 1:
                g = (gym @ w.reshape(-1, w.shape[3]).T).reshape(
                    g.shape[:3] + (w.shape[2],)
                )
            else:
                g = _conv3_input_grad(g, w)
        elif kind == "concat":
            _, lv, n_up = entry
            skip_grads[lv] = g[:, :, :, n_up:]
            g = g[:, :, :, :n_up]
        elif kind == "up":
            g = _upsample2_backward(g)
        elif kind == "pool":
            g = _pool2_backward(g, entry[1])
        elif kind == "skip":
            g = g + skip_grads.pop(entry[1])
        else:  # pragma: no cover
            raise RuntimeError(f"unknown trace entry {kind!r}")
    return grads


def predict_logits(params, x, chunk=8):
    """Forward in chunks without keeping traces; returns (B, n_out, H, W)."""

    x = np.asarray(x)
    outs = []
    for start in range(0, x.shape[0], chunk):
        logits, _ = forward(params, x[start : start + chunk])
        outs.append(logits)
    return np.concatenate(outs, axis=0)


def predict_masks(params, depth):
    """Binary organ masks for one depth image.

    Each logit channel passes through a sigmoid and is thresholded strictly
    above 0.5. Returns a canonical-order :class:`MaskStack` on the depth
    image's grid.
    """

    if params.arch.n_out != len(ORGAN_NAMES):
        raise ArchError("predict_masks needs one output channel per organ")
    if not isinstance(depth, DepthImage):
        raise TypeError("predict_masks expects a DepthImage")
    w, h = depth.dims
    if (h, w) != params.arch.input_hw:
        raise ShapeError(
            f"depth image {depth.dims} does not match network input "
            f"{params.arch.input_hw}"
        )
    logits, _ = forward(params, depth.values.T[None])
    probs = expit(logits[0])
    channels = (probs > 0.5).astype(np.uint8).transpose(0, 2, 1)
    return MaskStack(ORGAN_NAMES, depth.dims, depth.spacing, channels)


def masks_from_logits(logits, spacing):
    """Threshold a logits batch into per-case mask stacks (sigmoid > 0.5)."""

    if logits.ndim != 4 or logits.shape[1] != len(ORGAN_NAMES):
        raise ShapeError("expected logits shaped (B, n_organs, H, W)")
    masks = (expit(logits) > 0.5).astype(np.uint8)
    w, h = logits.shape[3], logits.shape[2]
    return [
        MaskStack(ORGAN_NAMES, (w, h), spacing, m.transpose(0, 2, 1)) for m in masks
    ]
