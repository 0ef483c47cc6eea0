"""Differentiable operations on :class:`Tensor`.

Images are laid out channel-first, ``[C, H, W]``. Only the operations the
segmentation network needs are provided; binary ops require equal shapes
(there is no general broadcasting).
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, make_result

Scalar = Union[int, float]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- pointwise


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(x: Tensor, c: Scalar) -> Tensor:
    c = float(c)
    return make_result(x.data * c, (x,), lambda g: (g * c,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the math name
    sign = np.sign(x.data)  # sign(0) == 0 is the subgradient convention
    return make_result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def log(x: Tensor) -> Tensor:
    d = x.data
    return make_result(np.log(d), (x,), lambda g: (g / d,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is passed only where no clamping happened."""
    d = x.data
    mask = (d >= lo) & (d <= hi)
    return make_result(np.clip(d, lo, hi), (x,), lambda g: (g * mask,), "clip")


# --------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.size)


def standardize_channels(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-channel ``(x - mean) / sqrt(var + eps)`` over the spatial axes of ``[C, H, W]``."""
    if x.data.ndim != 3:
        raise DimensionError(f"standardize_channels expects [C,H,W], got {x.shape}")
    d = x.data
    mu = d.mean(axis=(1, 2), keepdims=True)
    sigma = np.sqrt(d.var(axis=(1, 2), keepdims=True) + eps)
    out = (d - mu) / sigma

    def backward(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gy = (g * out).mean(axis=(1, 2), keepdims=True)
        return ((g - gm - out * gy) / sigma,)

    return make_result(out, (x,), backward, "standardize")


# -------------------------------------------------------------- structural


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack ``[C_i, H, W]`` tensors along the channel axis."""
    if not xs:
        raise ContractError("concat_channels needs at least one tensor")
    spatial = xs[0].shape[1:]
    for t in xs:
        if t.data.ndim != 3 or t.shape[1:] != spatial:
            raise DimensionError(f"concat_channels: incompatible shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])

    def backward(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_result(np.concatenate([t.data for t in xs], axis=0), xs, backward, "concat")


def channel(x: Tensor, index: int) -> Tensor:
    """Select one channel as a ``[1, H, W]`` tensor."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g[0]
        return (full,)

    return make_result(x.data[index : index + 1].copy(), (x,), backward, "channel")


# -------------------------------------------------------------- convolution


def _tap_ranges(i: int, pad: int, n_out: int, n_in: int):
    """Output index range whose tap ``i`` lands inside the unpadded input, plus the input start."""
    shift = i - pad
    lo = max(0, -shift)
    hi = min(n_out, n_in - shift)
    return lo, hi, lo + shift


def _im2col(xd: np.ndarray, kh: int, kw: int, pad: int, ho: int, wo: int) -> np.ndarray:
    c, h, w = xd.shape
    cols = np.zeros((c, kh, kw, ho, wo)) if pad else np.empty((c, kh, kw, ho, wo))
    for i in range(kh):
        y0, y1, sy = _tap_ranges(i, pad, ho, h)
        if y1 <= y0:
            continue
        for j in range(kw):
            x0, x1, sx = _tap_ranges(j, pad, wo, w)
            if x1 <= x0:
                continue
            cols[:, i, j, y0:y1, x0:x1] = xd[:, sy : sy + y1 - y0, sx : sx + x1 - x0]
    return cols


def _col2im(gcols: np.ndarray, h: int, w: int, pad: int) -> np.ndarray:
    c, kh, kw, ho, wo = gcols.shape
    gx = np.zeros((c, h, w))
    for i in range(kh):
        y0, y1, sy = _tap_ranges(i, pad, ho, h)
        if y1 <= y0:
            continue
        for j in range(kw):
            x0, x1, sx = _tap_ranges(j, pad, wo, w)
            if x1 <= x0:
                continue
            gx[:, sy : sy + y1 - y0, sx : sx + x1 - x0] += gcols[:, i, j, y0:y1, x0:x1]
    return gx



def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[C_in,H,W]`` with ``weight[C_out,C_in,k,k]`` plus bias.

    ``pad`` zeros are added on every side; ``pad = (k-1)//2`` keeps the size.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] input and 4-d weight, got {x.shape}, {weight.shape}")
    c_in, h, w = x.shape
    c_out, wc, kh, kw = weight.shape
    if wc != c_in:
        raise DimensionError(f"conv2d: weight expects {wc} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d: kernel larger than padded input")

    xd = x.data
    wm = weight.data.reshape(c_out, -1)
    direct = kh == 1 and kw == 1 and pad == 0
    if direct:
        cols = xd.reshape(c_in, h * w)
    else:
        cols = _im2col(xd, kh, kw, pad, ho, wo).reshape(c_in * kh * kw, ho * wo)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, ho, wo)

    def backward(g):
        g2 = g.reshape(c_out, ho * wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            gcols = wm.T @ g2
            if direct:
                gx = gcols.reshape(c_in, h, w)
            else:
                gx = _col2im(gcols.reshape(c_in, kh, kw, ho, wo), h, w, pad)
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


# ------------------------------------------------------------ resampling


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties go to the first cell in row-major order."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even H and W, got {h}x{w}")
    blocks = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((c, h // 2, w // 2, 4))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return make_result(out, (x,), backward, "maxpool2")


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2 needs even H and W, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return make_result(out, (x,), backward, "avgpool2")


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # align_corners=False, factor 2: even outputs sit 1/4 pixel left of the source
    # cell, odd outputs 1/4 right; neighbours are clamped at the border.
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * n,))
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up_axis_t(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    # transpose of the "prev" and "next" neighbour gathers
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling with the align-corners-false convention."""
    if x.data.ndim != 3:
        raise DimensionError(f"upsample_bilinear2 expects [C,H,W], got {x.shape}")
    out = _up_axis(_up_axis(x.data, 1), 2)

    def backward(g):
        return (_up_axis_t(_up_axis_t(g, 2), 1),)

    return make_result(out, (x,), backward, "upsample")
