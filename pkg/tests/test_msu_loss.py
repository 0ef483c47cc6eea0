import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselseg import ops
from vesselseg.gradcheck import grad_check
from vesselseg.layers import Conv2d
from vesselseg.loss import LossConfig, class_terms, combined_supervision_loss, weighted_joint_loss
from vesselseg.msu import SCALES, MsuBlock, msu_forward
from vesselseg.tensor import ContractError, DimensionError, Tensor, backward, parameter

# ------------------------------------------------------------------- MSU


def correlate_same(x, w):
    """Plain-loop same-size cross-correlation of x[C,H,W] with w[O,C,k,k]."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    r = k // 2
    out = np.zeros((o, h, wd))
    for oc in range(o):
        for i in range(h):
            for j in range(wd):
                s = 0.0
                for ic in range(c):
                    for u in range(k):
                        for v in range(k):
                            y, xx = i + u - r, j + v - r
                            if 0 <= y < h and 0 <= xx < wd:
                                s += w[oc, ic, u, v] * x[ic, y, xx]
                out[oc, i, j] = s
    return out


def msu_reference(a, b, block):
    """Both branches filtered separately, then subtracted, as the expression is written."""
    total = 0.0
    for conv in block.scales:
        w = conv.weight.data
        total = total + np.abs(correlate_same(a, w) - correlate_same(b, w))
    return correlate_same(total, block.out.weight.data) + block.out.bias.data[:, None, None]


def zero_bias(block):
    block.out.bias.data[...] = 0.0
    return block


def test_msu_layout():
    block = MsuBlock.create(np.random.default_rng(0), 4, 6)
    assert [c.kernel for c in block.scales] == list(SCALES) == [1, 3, 5]
    assert all(c.bias is None for c in block.scales)
    assert block.out.weight.shape == (6, 4, 3, 3)


@pytest.mark.parametrize("seed", range(5))
def test_msu_equal_inputs_give_zero(seed):
    rng = np.random.default_rng(seed)
    block = zero_bias(MsuBlock.create(rng, 3))
    a = Tensor(rng.normal(size=(3, 6, 5)))
    assert not msu_forward(a, a, block).data.any()


def test_msu_equal_inputs_give_output_bias():
    rng = np.random.default_rng(9)
    block = MsuBlock.create(rng, 2)
    a = Tensor(rng.normal(size=(2, 4, 4)))
    out = msu_forward(a, a, block).data
    for c in range(2):
        assert (out[c] == block.out.bias.data[c]).all()


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_msu_symmetric_bitwise(seed):
    rng = np.random.default_rng(seed)
    block = MsuBlock.create(rng, 2)
    a, b = Tensor(rng.normal(size=(2, 5, 5))), Tensor(rng.normal(size=(2, 5, 5)))
    assert msu_forward(a, b, block).data.tobytes() == msu_forward(b, a, block).data.tobytes()


def test_msu_identity_kernels_give_three_abs():
    rng = np.random.default_rng(1)
    scales = []
    for k in SCALES:
        w = np.zeros((1, 1, k, k))
        w[0, 0, k // 2, k // 2] = 1.0
        scales.append(Conv2d(parameter(w), None))
    out_w = np.zeros((1, 1, 3, 3))
    out_w[0, 0, 1, 1] = 1.0
    block = MsuBlock(scales, Conv2d(parameter(out_w), parameter(np.zeros(1))))
    a = Tensor(rng.normal(size=(1, 4, 4)))
    out = msu_forward(a, Tensor(np.zeros((1, 4, 4))), block)
    np.testing.assert_allclose(out.data, 3 * np.abs(a.data), atol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_msu_matches_expression_oracle(seed):
    rng = np.random.default_rng(seed)
    block = MsuBlock.create(rng, 1)
    a, b = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
    out = msu_forward(Tensor(a), Tensor(b), block).data
    np.testing.assert_allclose(out, msu_reference(a, b, block), rtol=0, atol=1e-12)


def test_msu_shape_mismatch():
    block = MsuBlock.create(np.random.default_rng(0), 2)
    with pytest.raises(DimensionError):
        msu_forward(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((2, 4, 5))), block)


@pytest.mark.parametrize("seed", range(5))
def test_msu_gradient(seed):
    rng = np.random.default_rng(seed)
    block = MsuBlock.create(rng, 1)
    a, b = parameter(rng.normal(size=(1, 4, 4))), parameter(rng.normal(size=(1, 4, 4)))
    r = Tensor(rng.normal(size=(1, 4, 4)))
    params = list(block.named_parameters("m").values())
    err = grad_check(lambda a, b, *_: ops.sum(ops.mul(msu_forward(a, b, block), r)), [a, b, *params])
    assert err < 1e-4


# ------------------------------------------------------------------ loss


def loss_reference(p, g, w0=0.9, w1=0.1, eps=1e-7, mask=None):
    """Straight-line scalar evaluation of the class-weighted Dice + BCE loss."""
    p, g = np.asarray(p, float).ravel(), np.asarray(g, float).ravel()
    mask = np.ones_like(p) if mask is None else np.asarray(mask, float).ravel()
    idx = [i for i in range(p.size) if mask[i] > 0]
    n = len(idx)
    total = 0.0
    for k, wk in ((0, w0), (1, w1)):
        pk = [p[i] if k == 1 else 1 - p[i] for i in idx]
        gk = [g[i] if k == 1 else 1 - g[i] for i in idx]
        dice = 1 - 2 * sum(a * b for a, b in zip(pk, gk)) / (sum(pk) + sum(gk))
        bce = 0.0
        for a, b in zip(pk, gk):
            a = min(max(a, eps), 1 - eps)
            bce -= b * math.log(a) + (1 - b) * math.log(1 - a)
        total += wk * (0.5 * dice + 0.5 * bce / n)
    return total


def test_loss_defaults():
    cfg = LossConfig()
    assert (cfg.w0, cfg.w1, cfg.eps, cfg.dice_numerator) == (0.9, 0.1, 1e-7, "product")


def test_loss_hand_case():
    g = np.array([[1, 0], [0, 0]])
    p = np.array([[0.8, 0.2], [0.1, 0.1]])
    value = weighted_joint_loss(Tensor(p[None]), g).item()
    assert value == pytest.approx(loss_reference(p, g), abs=1e-12)
    bce = -(math.log(0.8) + math.log(0.8) + 2 * math.log(0.9)) / 4
    dice1 = 1 - 1.6 / 2.2
    dice0 = 1 - 2 * (0.8 + 0.9 + 0.9) / (2.8 + 3)
    assert value == pytest.approx(0.9 * (dice0 + bce) / 2 + 0.1 * (dice1 + bce) / 2, abs=1e-12)


def test_loss_perfect_prediction():
    rng = np.random.default_rng(0)
    g = (rng.random((8, 8)) < 0.2).astype(float)
    g[0, 0], g[0, 1] = 1, 0
    p = np.clip(g, 1e-7, 1 - 1e-7)
    assert weighted_joint_loss(Tensor(p[None]), g).item() < 1e-5


def test_loss_vessel_weight_only_equals_vessel_terms():
    rng = np.random.default_rng(1)
    g = (rng.random((6, 6)) < 0.3).astype(float)
    p = Tensor(rng.uniform(0.05, 0.95, size=(1, 6, 6)))
    cfg = LossConfig(w0=0.0, w1=1.0)
    dice, bce = class_terms(p, g.reshape(1, 6, 6), 1, np.ones((1, 6, 6)), cfg)
    assert weighted_joint_loss(p, g, cfg=cfg).item() == pytest.approx(0.5 * dice.item() + 0.5 * bce.item(), abs=1e-15)


def test_loss_fov_restricts_pixels():
    rng = np.random.default_rng(2)
    g = (rng.random((6, 6)) < 0.3).astype(float)
    p = rng.uniform(0.05, 0.95, size=(6, 6))
    fov = np.zeros((6, 6))
    fov[1:5, 1:5] = 1
    fov[1, 1], g[1, 1] = 1, 1
    value = weighted_joint_loss(Tensor(p[None]), g, fov).item()
    assert value == pytest.approx(loss_reference(p, g, mask=fov), abs=1e-12)
    p2 = p.copy()
    p2[0, 0] = 0.5  # outside the fov: no effect
    assert weighted_joint_loss(Tensor(p2[None]), g, fov).item() == value
    with pytest.raises(ContractError):
        weighted_joint_loss(Tensor(p[None]), g, np.zeros((6, 6)))


def test_difference_numerator_option():
    g = np.array([[1, 0], [0, 0]])
    p = np.array([[0.8, 0.2], [0.1, 0.1]])
    cfg = LossConfig(dice_numerator="difference")
    value = weighted_joint_loss(Tensor(p[None]), g, cfg=cfg).item()
    bce = -(math.log(0.8) + math.log(0.8) + 2 * math.log(0.9)) / 4
    dice1 = 1 - 2 * (1 - 1.2) / (1.2 + 1)
    dice0 = 1 - 2 * (3 - 2.8) / (2.8 + 3)
    assert value == pytest.approx(0.9 * (dice0 + bce) / 2 + 0.1 * (dice1 + bce) / 2, abs=1e-12)
    with pytest.raises(ContractError):
        LossConfig(dice_numerator="other")


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    g = (rng.random((5, 5)) < 0.3).astype(float)
    p = rng.random((1, 5, 5))
    assert weighted_joint_loss(Tensor(p), g).item() >= 0.0


def test_loss_increases_when_vessel_pixel_flips():
    g = np.zeros((4, 4))
    g[1, 1:3] = 1
    p = np.clip(g, 1e-7, 1 - 1e-7)
    values = []
    for v in (1 - 1e-7, 0.9, 0.5, 0.1, 1e-7):
        q = p.copy()
        q[1, 1] = v
        values.append(weighted_joint_loss(Tensor(q[None]), g).item())
    assert all(b > a for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    g = (rng.random((8, 8)) < 0.3).astype(float)
    p = parameter(rng.uniform(0.02, 0.98, size=(1, 8, 8)))
    assert grad_check(lambda p: weighted_joint_loss(p, g), [p]) < 1e-4


@given(st.floats(0.1, 10.0), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_loss_weight_scaling(c, seed):
    rng = np.random.default_rng(seed)
    g = (rng.random((5, 5)) < 0.3).astype(float)
    pd = rng.uniform(0.05, 0.95, size=(1, 5, 5))
    grads, vals = [], []
    for scale in (1.0, c):
        p = parameter(pd)
        loss = weighted_joint_loss(p, g, cfg=LossConfig(w0=0.9 * scale, w1=0.1 * scale))
        backward(loss)
        grads.append(p.grad.ravel())
        vals.append(loss.item())
    assert vals[1] == pytest.approx(c * vals[0], rel=1e-12)
    cos = grads[0] @ grads[1] / (np.linalg.norm(grads[0]) * np.linalg.norm(grads[1]))
    assert abs(cos - 1.0) < 1e-9


def test_combined_supervision():
    rng = np.random.default_rng(3)
    g = (rng.random((6, 6)) < 0.3).astype(float)
    maps = [Tensor(rng.uniform(0.05, 0.95, size=(1, 6, 6))) for _ in range(3)]
    single = weighted_joint_loss(maps[0], g).item()
    assert combined_supervision_loss(maps[:1], g).item() == single
    assert combined_supervision_loss([maps[0]] * 3, g).item() == pytest.approx(single, abs=1e-15)
    direct = sum(w * weighted_joint_loss(m, g).item() for m, w in zip(maps, (0.25, 0.25, 0.5)))
    assert combined_supervision_loss(maps, g, weights=(0.25, 0.25, 0.5)).item() == pytest.approx(direct, abs=1e-14)
    with pytest.raises(ContractError):
        combined_supervision_loss(maps, g, weights=(0.5, 0.5))
    with pytest.raises(ContractError):
        combined_supervision_loss(maps, g, weights=(0.5, 0.5, 0.5))
