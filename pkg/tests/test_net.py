import numpy as np
import pytest

from depthloc.net import (
    ArchError,
    ArchSpec,
    NetworkParams,
    ShapeError,
    backward,
    forward,
    init_params,
    masks_from_logits,
    n_parameters,
    param_names,
    predict_logits,
    predict_masks,
)
from depthloc.voldata import ORGAN_NAMES, DepthImage


def test_arch_spec_validation():
    ArchSpec()
    with pytest.raises(ArchError):
        ArchSpec(levels=1, channels=(8,))
    with pytest.raises(ArchError):
        ArchSpec(levels=3, channels=(8, 16))
    with pytest.raises(ArchError):
        ArchSpec(input_hw=(190, 96))  # 190 not divisible by 4
    with pytest.raises(ArchError):
        ArchSpec(n_out=0)


def test_param_names_order():
    names = param_names(ArchSpec(levels=2, channels=(4, 8), input_hw=(8, 8), n_out=3))
    assert names == [
        "enc0_conv1_w", "enc0_conv1_b", "enc0_conv2_w", "enc0_conv2_b",
        "enc1_conv1_w", "enc1_conv1_b", "enc1_conv2_w", "enc1_conv2_b",
        "dec0_conv1_w", "dec0_conv1_b", "dec0_conv2_w", "dec0_conv2_b",
        "out_w", "out_b",
    ]


def test_default_parameter_count():
    params = init_params(ArchSpec(), 0)
    # [DERIVED] summed by hand over the layer plan:
    # enc0 160+2320, enc1 4640+9248, enc2 18496+36928,
    # dec1 27680+9248, dec0 6928+2320, out 187 -> 118155
    assert n_parameters(params) == 118155


def test_init_is_deterministic_and_scaled():
    a = init_params(ArchSpec(), 123)
    b = init_params(ArchSpec(), 123)
    c = init_params(ArchSpec(), 124)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])
    assert any(not np.array_equal(a.tensors[n], c.tensors[n]) for n in a.tensors)
    w = a.tensors["enc1_conv1_w"]
    bound = np.sqrt(6.0 / (9 * 16))
    assert w.min() >= -bound and w.max() <= bound
    assert a.tensors["enc1_conv1_b"].tolist() == [0.0] * 32
    assert w.dtype == np.float32


def test_network_params_validates_shapes():
    arch = ArchSpec(levels=2, channels=(2, 4), input_hw=(4, 4), n_out=1)
    good = init_params(arch, 0)
    bad = dict(good.tensors)
    bad["out_b"] = np.zeros(2, dtype=np.float32)
    with pytest.raises(ArchError):
        NetworkParams(arch, bad)
    bad = dict(good.tensors)
    del bad["out_w"]
    with pytest.raises(ArchError):
        NetworkParams(arch, bad)


def _tiny_arch():
    return ArchSpec(levels=2, channels=(3, 5), input_hw=(8, 6), n_out=2)


def test_forward_shapes_and_input_checks():
    arch = _tiny_arch()
    params = init_params(arch, 0)
    x = np.random.default_rng(0).random((4, 8, 6), dtype=np.float32)
    logits, trace = forward(params, x)
    assert logits.shape == (4, 2, 8, 6)
    assert logits.dtype == np.float32
    assert trace.batch == 4
    with pytest.raises(ShapeError):
        forward(params, x[:, :6, :])
    with pytest.raises(ShapeError):
        forward(params, x[0])


def test_forward_is_deterministic():
    params = init_params(_tiny_arch(), 5)
    x = np.random.default_rng(1).random((2, 8, 6), dtype=np.float32)
    a, _ = forward(params, x)
    b, _ = forward(params, x)
    assert np.array_equal(a, b)


def test_backward_rejects_wrong_grad_shape():
    params = init_params(_tiny_arch(), 0)
    x = np.random.default_rng(2).random((2, 8, 6), dtype=np.float32)
    _, trace = forward(params, x)
    with pytest.raises(ShapeError):
        backward(params, trace, np.zeros((2, 2, 6, 8), dtype=np.float32))


def test_backward_covers_every_parameter():
    arch = _tiny_arch()
    params = init_params(arch, 3)
    x = np.random.default_rng(3).random((2, 8, 6), dtype=np.float32)
    logits, trace = forward(params, x)
    grads = backward(params, trace, np.ones_like(logits))
    assert set(grads) == set(param_names(arch))
    for name, g in grads.items():
        assert g.shape == params.tensors[name].shape
        assert np.isfinite(g).all()


def _loss_and_grads(params, x, target_logit_grad_seed):
    """Scalar probe loss sum(logits * r) with fixed random r, plus grads."""

    logits, trace = forward(params, x)
    rng = np.random.default_rng(target_logit_grad_seed)
    r = rng.normal(size=logits.shape)
    loss = float((logits * r).sum())
    grads = backward(params, trace, r.astype(logits.dtype))
    return loss, grads


def test_gradients_match_finite_differences():
    # double precision so central differences resolve the slopes
    arch = _tiny_arch()
    params = init_params(arch, 7).astype(np.float64)
    rng = np.random.default_rng(8)
    x = rng.random((2, 8, 6))
    _, grads = _loss_and_grads(params, x, 99)
    eps = 1e-6
    for name in param_names(arch):
        t = params.tensors[name]
        flat_idx = rng.choice(t.size, size=min(4, t.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, t.shape)
            for sign, store in ((+1, "hi"), (-1, "lo")):
                bumped = {k: v.copy() for k, v in params.tensors.items()}
                bumped[name][idx] += sign * eps
                val, _ = _loss_and_grads(NetworkParams(arch, bumped), x, 99)
                if store == "hi":
                    hi = val
                else:
                    lo = val
            fd = (hi - lo) / (2 * eps)
            an = grads[name][idx]
            assert an == pytest.approx(fd, rel=1e-5, abs=1e-7), name


def test_relu_uses_zero_subgradient():
    # one conv path held at exactly 0 pre-activation must pass no gradient
    arch = ArchSpec(levels=2, channels=(1, 1), input_hw=(4, 4), n_out=1)
    tensors = {}
    for name in param_names(arch):
        if name.endswith("_w"):
            shape = {  # all-zero weights give all-zero pre-activations
                "enc0_conv1_w": (3, 3, 1, 1), "enc0_conv2_w": (3, 3, 1, 1),
                "enc1_conv1_w": (3, 3, 1, 1), "enc1_conv2_w": (3, 3, 1, 1),
                "dec0_conv1_w": (3, 3, 2, 1), "dec0_conv2_w": (3, 3, 1, 1),
                "out_w": (1, 1, 1, 1),
            }[name]
            tensors[name] = np.zeros(shape, dtype=np.float64)
        else:
            tensors[name] = np.zeros(1, dtype=np.float64)
    params = NetworkParams(arch, tensors)
    x = np.ones((1, 4, 4))
    logits, trace = forward(params, x)
    grads = backward(params, trace, np.ones_like(logits))
    # every ReLU sits exactly at 0, so nothing flows back past the out conv
    assert grads["enc0_conv1_w"].tolist() == np.zeros((3, 3, 1, 1)).tolist()
    assert grads["out_b"][0] == 16.0  # d(sum logits)/d(out bias) = pixels


def test_pooling_and_upsampling_keep_constant_images_constant():
    arch = ArchSpec(levels=2, channels=(3, 5), input_hw=(32, 32), n_out=2)
    params = init_params(arch, 11)
    x = np.full((1, 32, 32), 0.5, dtype=np.float32)
    logits, _ = forward(params, x)
    # a constant input stays constant through conv/pool/upsample away from
    # the zero-padded borders; the halo is 2px per conv pair plus 4px for
    # the half-resolution level, so the centre block is uniform
    inner = logits[0, :, 10:22, 10:22]
    assert np.allclose(inner, inner[:, :1, :1], atol=1e-6)


def test_predict_logits_chunks_match_single_pass():
    params = init_params(_tiny_arch(), 13)
    x = np.random.default_rng(14).random((5, 8, 6), dtype=np.float32)
    whole, _ = forward(params, x)
    chunked = predict_logits(params, x, chunk=2)
    assert np.allclose(whole, chunked, atol=0)


def test_predict_masks_thresholds_strictly():
    arch = ArchSpec(levels=2, channels=(2, 3), input_hw=(4, 4), n_out=len(ORGAN_NAMES))
    params = init_params(arch, 0)
    # zero out everything: logits are exactly 0, sigmoid 0.5, strict > 0.5
    zeroed = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    params = NetworkParams(arch, zeroed)
    depth = DepthImage((4, 4), (4.0, 4.0), np.random.default_rng(1).random((4, 4), dtype=np.float32))
    stack = predict_masks(params, depth)
    assert stack.organ_names == ORGAN_NAMES
    assert stack.dims == (4, 4)
    assert not stack.channels.any()


def test_predict_masks_validates_grid():
    params = init_params(ArchSpec(levels=2, channels=(2, 3), input_hw=(4, 4)), 0)
    depth = DepthImage((6, 4), (4.0, 4.0), np.zeros((6, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        predict_masks(params, depth)
    with pytest.raises(TypeError):
        predict_masks(params, np.zeros((4, 4)))


def test_masks_from_logits_layout():
    logits = np.zeros((2, len(ORGAN_NAMES), 6, 4), dtype=np.float32)
    logits[0, 2, 1, 3] = 5.0  # one confident pixel at (h=1, w=3)
    stacks = masks_from_logits(logits, (4.0, 4.0))
    assert len(stacks) == 2
    assert stacks[0].dims == (4, 6)  # (W, H)
    assert stacks[0].channels[2, 3, 1] == 1  # [x=3, z=1]
    assert stacks[0].channels.sum() == 1
    assert not stacks[1].channels.any()
