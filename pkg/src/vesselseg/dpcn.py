"""Pulse-coupled enhancement network with a deformable linking convolution.

Each iteration updates five maps::

    L(n) = deform_conv(Y(n-1))            linking
    F(n) = I                              feeding
    U(n) = F(n) * (1 + beta * L(n))       modulation
    E(n) = exp(-alpha_e) E(n-1) + v_e Y(n-1)   dynamic threshold
    Y(n) = sigmoid(U(n) - E(n))           activation

starting from Y(0) = E(0) = 0. The whole unrolled run is differentiable, so the
linking layer trains together with the segmentation loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import ops
from .layers import Conv2d
from .tensor import ContractError, DimensionError, Tensor, make_result, parameter

# classical PCNN linking kernel (inverse-distance neighbours), normalised to unit sum
PCNN_KERNEL = np.array([[0.5, 1.0, 0.5], [1.0, 0.0, 1.0], [0.5, 1.0, 0.5]]) / 6.0
PCNN_KERNEL.setflags(write=False)


@dataclass(frozen=True)
class DpcnParams:
    beta: float = 64.0
    alpha_e: float = 0.1
    v_e: float = 7.0
    iterations: int = 15

    def __post_init__(self):
        if self.beta < 0:
            raise ContractError("beta must be >= 0")
        if self.alpha_e <= 0:
            raise ContractError("alpha_e must be > 0")
        if self.v_e < 0:
            raise ContractError("v_e must be >= 0")
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")


@dataclass
class DpcnState:
    F: Tensor
    L: Tensor
    U: Tensor
    E: Tensor
    Y: Tensor


def deform_conv2d(x: Tensor, weight: Tensor, offsets: Tensor) -> Tensor:
    """3x3 deformable convolution of a single-channel map.

    ``offsets`` has 18 channels: for kernel tap ``t = 3*(i+1) + (j+1)`` channel
    ``2t`` holds the row shift and ``2t+1`` the column shift. Samples are read
    bilinearly from the zero-padded input (one pixel of zeros on every side),
    with sample coordinates clamped to that padded rectangle. With all offsets
    zero this is exactly ``conv2d(x, weight, pad=1)``.
    """
    if x.data.ndim != 3 or x.shape[0] != 1:
        raise DimensionError(f"deform_conv2d expects a [1,H,W] map, got {x.shape}")
    _, h, w = x.shape
    if weight.shape != (1, 1, 3, 3):
        raise DimensionError(f"deform_conv2d weight must be [1,1,3,3], got {weight.shape}")
    if offsets.shape != (18, h, w):
        raise DimensionError(f"offsets must be [18,{h},{w}], got {offsets.shape}")

    wp = w + 2
    xp = np.pad(x.data[0], 1).reshape(-1)
    off = offsets.data.reshape(9, 2, h, w)
    ti, tj = np.divmod(np.arange(9), 3)
    rows = np.arange(h)[None, :, None]
    cols = np.arange(w)[None, None, :]
    qy_raw = rows + ti[:, None, None] + off[:, 0]  # padded coordinates: tap i-1 shifts by +1
    qx_raw = cols + tj[:, None, None] + off[:, 1]
    qy = np.clip(qy_raw, 0.0, h + 1.0)
    qx = np.clip(qx_raw, 0.0, w + 1.0)
    y0 = np.minimum(np.floor(qy), h).astype(np.intp)
    x0 = np.minimum(np.floor(qx), w).astype(np.intp)
    wy = qy - y0
    wx = qx - x0
    i00 = y0 * wp + x0
    v00, v01 = xp[i00], xp[i00 + 1]
    v10, v11 = xp[i00 + wp], xp[i00 + wp + 1]
    samples = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)  # [9,H,W]
    k = weight.data.reshape(9)
    out = np.tensordot(k, samples, axes=1)[None]

    def backward(g):
        g = g[0]
        gx = gw = goff = None
        if weight.requires_grad:
            gw = (samples * g).sum(axis=(1, 2)).reshape(1, 1, 3, 3)
        gk = k[:, None, None] * g  # d out / d sample, per tap
        if x.requires_grad:
            size = (h + 2) * wp
            acc = np.bincount(i00.ravel(), ((1 - wy) * (1 - wx) * gk).ravel(), size)
            acc += np.bincount((i00 + 1).ravel(), ((1 - wy) * wx * gk).ravel(), size)
            acc += np.bincount((i00 + wp).ravel(), (wy * (1 - wx) * gk).ravel(), size)
            acc += np.bincount((i00 + wp + 1).ravel(), (wy * wx * gk).ravel(), size)
            gx = acc.reshape(h + 2, wp)[1:-1, 1:-1][None].copy()
        if offsets.requires_grad:
            dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            my = (qy_raw >= 0) & (qy_raw <= h + 1)
            mx = (qx_raw >= 0) & (qx_raw <= w + 1)
            goff = np.stack([gk * dy * my, gk * dx * mx], axis=1).reshape(18, h, w)
        return (gx, gw, goff)

    return make_result(out, (x, weight, offsets), backward, "deform_conv2d")


@dataclass
class DeformConvLayer:
    """Trainable 3x3 linking kernel plus an offset predictor (conv 1 -> 18 channels)."""

    weight: Tensor
    offset_predictor: Conv2d
    max_offset: float = 2.0

    @classmethod
    def create(cls, kernel: np.ndarray = PCNN_KERNEL, max_offset: float = 2.0) -> "DeformConvLayer":
        # zero offset predictor: the layer starts out as an ordinary convolution
        predictor = Conv2d(parameter(np.zeros((18, 1, 3, 3))), parameter(np.zeros(18)))
        return cls(parameter(np.asarray(kernel, dtype=np.float64).reshape(1, 1, 3, 3)), predictor, max_offset)

    def offsets(self, x: Tensor) -> Tensor:
        return ops.clip(self.offset_predictor(x), -self.max_offset, self.max_offset)

    def __call__(self, x: Tensor) -> Tensor:
        return deform_conv2d(x, self.weight, self.offsets(x))

    def named_parameters(self, prefix: str = "dpcn") -> dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight}
        out.update(self.offset_predictor.named_parameters(f"{prefix}.offset"))
        return out


def _as_map(img: Union[Tensor, np.ndarray]) -> Tensor:
    if isinstance(img, Tensor):
        return img if img.data.ndim == 3 else Tensor(img.data[None])
    arr = np.asarray(img, dtype=np.float64)
    return Tensor(arr[None] if arr.ndim == 2 else arr)


def initial_state(image: Union[Tensor, np.ndarray]) -> DpcnState:
    I = _as_map(image)
    zero = Tensor(np.zeros(I.shape))
    return DpcnState(F=I, L=zero, U=zero, E=zero, Y=zero)


def dpcn_step(prev: DpcnState, image: Union[Tensor, np.ndarray], params: DpcnParams, layer: DeformConvLayer) -> DpcnState:
    I = _as_map(image)
    if prev.Y.shape != I.shape:
        raise DimensionError(f"state shape {prev.Y.shape} does not match image {I.shape}")
    L = layer(prev.Y)
    F = I
    U = ops.mul(F, ops.add(ops.scale(L, params.beta), 1.0))
    E = ops.add(ops.scale(prev.E, np.exp(-params.alpha_e)), ops.scale(prev.Y, params.v_e))
    Y = ops.sigmoid(ops.sub(U, E))
    return DpcnState(F=F, L=L, U=U, E=E, Y=Y)


def dpcn_run(
    image: Union[Tensor, np.ndarray],
    params: DpcnParams,
    layer: DeformConvLayer,
    return_states: bool = False,
) -> list:
    """Run ``params.iterations`` steps and return ``[Y(1), ..., Y(N)]`` (or the full states)."""
    state = initial_state(image)
    states = []
    for _ in range(params.iterations):
        state = dpcn_step(state, state.F, params, layer)
        states.append(state)
    return states if return_states else [s.Y for s in states]


def contrast_gap(enhanced: Union[Tensor, np.ndarray], label: np.ndarray) -> float:
    """Absolute difference of mean vessel and mean background intensity, on a 0-255 scale."""
    m = enhanced.data if isinstance(enhanced, Tensor) else np.asarray(enhanced, dtype=np.float64)
    m = m.reshape(np.shape(label))
    lab = np.asarray(label).astype(bool)
    if not lab.any() or lab.all():
        raise ContractError("contrast_gap needs at least one vessel and one background pixel")
    return float(abs(255.0 * m[lab].mean() - 255.0 * m[~lab].mean()))


def select_iterations(seq: Sequence[Tensor], indices: Sequence[int]) -> Tensor:
    """Stack the chosen 1-based iterations ``Y(n)`` into an ``[len(indices), H, W]`` tensor."""
    if not indices:
        raise ContractError("select_iterations needs at least one index")
    for n in indices:
        if not 1 <= n <= len(seq):
            raise ContractError(f"iteration {n} outside 1..{len(seq)}")
    return ops.concat_channels([seq[n - 1] for n in indices])
