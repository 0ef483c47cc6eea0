"""Finite-difference checks of every hand-written backward pass that training relies on."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .dpcn import DeformConvLayer, DpcnParams, deform_conv2d, dpcn_run
from .gradcheck import grad_check
from .layers import Conv2d
from .loss import LossConfig, weighted_joint_loss
from .msu import MsuBlock, msu_forward
from .tensor import Tensor, parameter


def _projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    # a random linear functional exercises every output element with distinct weights
    return ops.sum(ops.mul(out, Tensor(rng.normal(size=out.shape))))


def check_conv2d(seed: int, eps: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    x = parameter(rng.normal(size=(2, 5, 6)))
    w = parameter(rng.normal(size=(3, 2, 3, 3)))
    b = parameter(rng.normal(size=3))
    r = rng.normal(size=(3, 5, 6))
    return grad_check(lambda x, w, b: ops.sum(ops.mul(ops.conv2d(x, w, b, pad=1), Tensor(r))), [x, w, b], eps)


def check_deform_conv2d(seed: int, eps: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    x = parameter(rng.random((1, 5, 5)))
    w = parameter(rng.normal(size=(1, 1, 3, 3)))
    off = parameter(rng.uniform(-1.5, 1.5, size=(18, 5, 5)))
    r = rng.normal(size=(1, 5, 5))
    return grad_check(lambda x, w, o: ops.sum(ops.mul(deform_conv2d(x, w, o), Tensor(r))), [x, w, off], eps)


def check_msu(seed: int, eps: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    block = MsuBlock.create(rng, 2)
    a = parameter(rng.normal(size=(2, 6, 6)))
    b = parameter(rng.normal(size=(2, 6, 6)))
    r = rng.normal(size=(2, 6, 6))
    params = list(block.named_parameters("msu").values())

    def fn(a, b, *_):
        return ops.sum(ops.mul(msu_forward(a, b, block), Tensor(r)))

    return grad_check(fn, [a, b, *params], eps)


def check_loss(seed: int, eps: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    z = parameter(rng.normal(size=(1, 6, 6)))
    g = (rng.random((6, 6)) < 0.3).astype(np.uint8)
    g[0, 0], g[0, 1] = 1, 0  # both classes present
    fov = (rng.random((6, 6)) < 0.8).astype(np.uint8)
    fov[0, :2] = 1
    return grad_check(lambda z: weighted_joint_loss(ops.sigmoid(z), g, fov, LossConfig()), [z], eps)


def smooth_offset_predictor(rng: np.random.Generator) -> Conv2d:
    """Random offset predictor whose outputs stay at least ~0.2 px away from integer shifts.

    Bilinear sampling has kinks at integer coordinates; a central difference
    straddling one measures the kink, not the gradient.
    """
    bias = rng.integers(-1, 1, size=18) + rng.uniform(0.3, 0.7, size=18)
    return Conv2d(parameter(rng.normal(0.0, 0.01, size=(18, 1, 3, 3))), parameter(bias))


def check_dpcn(seed: int, eps: float = 1e-5, iterations: int = 5) -> float:
    rng = np.random.default_rng(seed)
    layer = DeformConvLayer.create()
    layer.offset_predictor = smooth_offset_predictor(rng)
    image = parameter(rng.random((1, 6, 6)))
    params = DpcnParams(iterations=iterations)
    r = rng.normal(size=(1, 6, 6))
    trainable = list(layer.named_parameters().values())

    def fn(img, *_):
        seq = dpcn_run(img, params, layer)
        total = ops.sum(ops.mul(seq[-1], Tensor(r)))
        return ops.add(total, ops.sum(seq[1]))

    return grad_check(fn, [image, *trainable], eps)


CHECKS: dict[str, Callable[[int, float], float]] = {
    "conv2d": check_conv2d,
    "deform_conv2d": check_deform_conv2d,
    "msu_forward": check_msu,
    "weighted_joint_loss": check_loss,
    "dpcn_run": check_dpcn,
}


def run_suite(seeds=range(5), eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per operation over all seeds."""
    return {name: max(check(s, eps) for s in seeds) for name, check in CHECKS.items()}
