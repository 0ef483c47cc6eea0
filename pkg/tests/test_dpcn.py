import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselseg import ops
from vesselseg.dpcn import (
    PCNN_KERNEL,
    DeformConvLayer,
    DpcnParams,
    contrast_gap,
    deform_conv2d,
    dpcn_run,
    dpcn_step,
    initial_state,
    select_iterations,
)
from vesselseg.gradcheck import grad_check
from vesselseg.gradsuite import smooth_offset_predictor
from vesselseg.tensor import ContractError, DimensionError, Tensor, backward, parameter


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_trace(i, alpha, v, n):
    """Independent pixel with no coupling: E(n) = e^-a E(n-1) + v Y(n-1), Y(n) = s(I - E(n))."""
    e = y = 0.0
    out = []
    for _ in range(n):
        e = math.exp(-alpha) * e + v * y
        y = sigmoid(i - e)
        out.append(y)
    return out


def bilinear_sample(img, y, x):
    """Bilinear read at padded coordinate (y, x) of an image zero-padded by one pixel."""
    h, w = img.shape
    p = np.zeros((h + 2, w + 2))
    p[1:-1, 1:-1] = img
    y = min(max(y, 0.0), h + 1.0)
    x = min(max(x, 0.0), w + 1.0)
    y0, x0 = min(int(math.floor(y)), h), min(int(math.floor(x)), w)
    dy, dx = y - y0, x - x0
    return (1 - dy) * ((1 - dx) * p[y0, x0] + dx * p[y0, x0 + 1]) + dy * ((1 - dx) * p[y0 + 1, x0] + dx * p[y0 + 1, x0 + 1])


def deform_reference(img, k, off):
    h, w = img.shape
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for i in (-1, 0, 1):
                for j in (-1, 0, 1):
                    t = 3 * (i + 1) + (j + 1)
                    y = r + 1 + i + off[2 * t, r, c]
                    x = c + 1 + j + off[2 * t + 1, r, c]
                    acc += k[i + 1, j + 1] * bilinear_sample(img, y, x)
            out[r, c] = acc
    return out


def zero_layer(kernel=PCNN_KERNEL):
    return DeformConvLayer.create(kernel)


# --------------------------------------------------------------- deform conv


@pytest.mark.parametrize("seed", range(5))
def test_zero_offsets_equal_conv2d(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random((1, 7, 9)))
    w = Tensor(rng.normal(size=(1, 1, 3, 3)))
    out = deform_conv2d(x, w, Tensor(np.zeros((18, 7, 9))))
    np.testing.assert_allclose(out.data, ops.conv2d(x, w, pad=1).data, rtol=0, atol=1e-12)


def test_zero_weight_gives_zero():
    rng = np.random.default_rng(0)
    out = deform_conv2d(Tensor(rng.random((1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(rng.normal(size=(18, 5, 5))))
    assert not out.data.any()


def test_half_pixel_shift_on_ramp():
    img = np.tile(np.arange(8.0), (6, 1))[None]
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    off = np.zeros((18, 6, 8))
    off[1::2] = 0.5  # every tap shifted half a pixel along columns
    out = deform_conv2d(Tensor(img), Tensor(w), Tensor(off)).data[0]
    np.testing.assert_allclose(out[:, 1:-1], img[0, :, 1:-1] + 0.5, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_deform_matches_pointwise_reference(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((5, 6))
    k = rng.normal(size=(3, 3))
    off = rng.uniform(-2.5, 2.5, size=(18, 5, 6))
    out = deform_conv2d(Tensor(img[None]), Tensor(k.reshape(1, 1, 3, 3)), Tensor(off)).data[0]
    np.testing.assert_allclose(out, deform_reference(img, k, off), atol=1e-12)


def test_deform_shape_errors():
    with pytest.raises(DimensionError):
        deform_conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((18, 4, 4))))
    with pytest.raises(DimensionError):
        deform_conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((9, 4, 4))))


@pytest.mark.parametrize("seed", range(5))
def test_deform_gradient(seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.random((1, 5, 5)))
    w = parameter(rng.normal(size=(1, 1, 3, 3)))
    off = parameter(rng.uniform(-1.5, 1.5, size=(18, 5, 5)))
    r = Tensor(rng.normal(size=(1, 5, 5)))
    assert grad_check(lambda x, w, o: ops.sum(ops.mul(deform_conv2d(x, w, o), r)), [x, w, off]) < 1e-4


def test_layer_starts_as_plain_convolution():
    layer = zero_layer()
    assert layer.offset_predictor.weight.shape == (18, 1, 3, 3)
    assert not layer.offset_predictor.weight.data.any() and not layer.offset_predictor.bias.data.any()
    x = Tensor(np.random.default_rng(0).random((1, 6, 6)))
    np.testing.assert_allclose(layer(x).data, ops.conv2d(x, layer.weight, pad=1).data, atol=1e-12)


def test_offsets_are_clamped():
    layer = zero_layer()
    layer.offset_predictor.bias.data[:] = 10.0
    off = layer.offsets(Tensor(np.ones((1, 4, 4))))
    assert off.data.max() == layer.max_offset == 2.0


# ------------------------------------------------------------------ dynamics


def test_default_params():
    p = DpcnParams()
    assert p.iterations == 15
    with pytest.raises(ContractError):
        DpcnParams(alpha_e=0.0)
    with pytest.raises(ContractError):
        DpcnParams(iterations=0)


def test_first_step_without_coupling_is_sigmoid():
    img = np.random.default_rng(1).random((1, 4, 5))
    state = dpcn_step(initial_state(img), img, DpcnParams(beta=0.0), zero_layer())
    np.testing.assert_array_equal(state.Y.data, 1 / (1 + np.exp(-img)))


def test_single_pixel_trace():
    params = DpcnParams(beta=0.0, alpha_e=0.5, v_e=10.0, iterations=2)
    seq = dpcn_run(np.array([[0.8]]), params, zero_layer())
    e1, y1 = 0.0, sigmoid(0.8)
    e2 = math.exp(-0.5) * e1 + 10 * y1
    assert seq[0].data.item() == pytest.approx(y1, abs=1e-15)
    assert seq[1].data.item() == pytest.approx(sigmoid(0.8 - e2), abs=1e-15)


def test_uncoupled_pixels_follow_scalar_recursion():
    rng = np.random.default_rng(2)
    img = rng.random((10, 10))
    params = DpcnParams(beta=0.0, alpha_e=0.3, v_e=4.0, iterations=15)
    seq = np.stack([y.data[0] for y in dpcn_run(img, params, zero_layer())])
    for r, c in np.ndindex(10, 10):
        np.testing.assert_allclose(seq[:, r, c], scalar_trace(img[r, c], 0.3, 4.0, 15), rtol=0, atol=1e-12)


def test_feeding_is_the_input():
    img = np.random.default_rng(3).random((6, 6))
    states = dpcn_run(img, DpcnParams(), zero_layer(), return_states=True)
    for s in states:
        np.testing.assert_array_equal(s.F.data[0], img)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 100.0), st.floats(0.05, 2.0), st.floats(0.0, 20.0))
@settings(max_examples=20, deadline=None)
def test_activation_stays_in_unit_interval(seed, beta, alpha, v):
    img = np.random.default_rng(seed).random((5, 5))
    for y in dpcn_run(img, DpcnParams(beta, alpha, v, 6), zero_layer()):
        assert ((y.data >= 0) & (y.data <= 1)).all()


def test_single_iteration_run():
    img = np.random.default_rng(4).random((3, 3))
    seq = dpcn_run(img, DpcnParams(beta=0.0, iterations=1), zero_layer())
    assert len(seq) == 1
    np.testing.assert_array_equal(seq[0].data[0], 1 / (1 + np.exp(-img)))


def test_run_replays_bitwise():
    img = np.random.default_rng(5).random((8, 8))
    a = [y.data.tobytes() for y in dpcn_run(img, DpcnParams(), zero_layer())]
    b = [y.data.tobytes() for y in dpcn_run(img.copy(), DpcnParams(), zero_layer())]
    assert a == b


@pytest.mark.parametrize("seed", range(5))
def test_unrolled_run_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = zero_layer()
    layer.offset_predictor = smooth_offset_predictor(rng)
    img = Tensor(rng.random((1, 8, 8)))
    params = DpcnParams(iterations=5)
    r = Tensor(rng.normal(size=(1, 8, 8)))
    trainable = list(layer.named_parameters().values())
    err = grad_check(lambda *_: ops.sum(ops.mul(dpcn_run(img, params, layer)[-1], r)), trainable)
    assert err < 1e-4


def test_linking_weight_receives_gradient():
    layer = zero_layer()
    seq = dpcn_run(np.random.default_rng(6).random((6, 6)), DpcnParams(iterations=4), layer)
    backward(ops.sum(seq[-1]))
    assert np.abs(layer.weight.grad).sum() > 0
    assert np.abs(layer.offset_predictor.weight.grad).sum() > 0


# ---------------------------------------------------------- contrast & stack


def test_contrast_gap_extremes():
    label = np.zeros((4, 4), dtype=np.uint8)
    label[1:3, 1:3] = 1
    assert contrast_gap(label.astype(float), label) == 255.0
    assert contrast_gap(np.full((4, 4), 0.3), label) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ContractError):
        contrast_gap(np.ones((4, 4)), np.zeros((4, 4)))


def test_select_iterations():
    seq = [Tensor(np.full((1, 2, 3), float(n))) for n in range(1, 16)]
    single = select_iterations(seq, [10])
    assert single.shape == (1, 2, 3) and (single.data == 10.0).all()
    stack = select_iterations(seq, [1, 5, 10, 15])
    assert stack.shape == (4, 2, 3)
    assert [stack.data[i, 0, 0] for i in range(4)] == [1.0, 5.0, 10.0, 15.0]
    for bad in ([0], [16], []):
        with pytest.raises(ContractError):
            select_iterations(seq, bad)
