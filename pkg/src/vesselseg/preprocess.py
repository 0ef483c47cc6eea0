"""Fundus preprocessing: weighted channel mix, CLAHE, gamma correction.

Gray images are ``[H, W]`` float arrays in [0, 1]; RGB images are ``[H, W, 3]``.

CLAHE algorithm (the contract other implementations can reproduce bit-exactly
on 8-bit data):

1. Quantise every pixel to a bin ``b = rint(v * (bins - 1))``.
2. Tile size is ``th = ceil(H / tiles_y)``, ``tw = ceil(W / tiles_x)``. The bin
   image is padded at the bottom and right by edge replication to
   ``th*tiles_y x tw*tiles_x`` so all tiles hold ``N = th*tw`` pixels.
3. Per tile, the histogram is clipped at ``clip_limit * N / bins``; the total
   clipped mass is spread evenly over all bins (one pass).
4. ``cdf`` is the running sum of the clipped histogram in bin order. With
   ``c0`` the cdf at the lowest occupied bin, the tile maps bin ``b`` to
   ``clip((cdf[b] - c0) / (N - c0), 0, 1)``. A tile whose pixels all share one
   bin (``N == c0``) maps every bin to ``b / (bins - 1)``.
5. Tile ``t`` is centred at ``(t + 0.5) * size - 0.5``. Each output pixel blends
   the mappings of the (up to) four tiles whose centres surround it,
   bilinearly by distance; beyond the outermost centres the nearest tile is
   used alone (its weight is exactly 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, DimensionError

MIX_WEIGHTS = (0.2793, 0.7041, 0.0166)


@dataclass(frozen=True)
class ClaheConfig:
    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ContractError("tile counts must be positive")
        if self.clip_limit < 1:
            raise ContractError("clip_limit must be >= 1")
        if self.bins < 2:
            raise ContractError("bins must be >= 2")


@dataclass(frozen=True)
class PreprocessConfig:
    clahe: ClaheConfig = field(default_factory=ClaheConfig)
    gamma: float = 1 / 1.2


def channel_mix(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"channel_mix expects [H, W, 3], got {rgb.shape}")
    r, g, b = MIX_WEIGHTS
    gray = r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]
    return np.clip(gray, 0.0, 1.0)


def quantize(img: np.ndarray, bins: int) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * (bins - 1)), 0, bins - 1).astype(np.intp)


def tile_mapping(bin_values: np.ndarray, clip_limit: float, bins: int) -> np.ndarray:
    """Clipped-histogram equalisation lookup table for one tile."""
    n = bin_values.size
    hist = np.bincount(bin_values.ravel(), minlength=bins).astype(np.float64)
    limit = clip_limit * n / bins
    excess = np.maximum(hist - limit, 0.0).sum()
    hist = np.minimum(hist, limit) + excess / bins
    cdf = np.cumsum(hist)
    c0 = cdf[np.flatnonzero(hist > 0)[0]]
    denom = n - c0
    if denom <= 0:
        return np.arange(bins) / (bins - 1)
    return np.clip((cdf - c0) / denom, 0.0, 1.0)


def _blend_axis(n: int, size: int, tiles: int):
    pos = (np.arange(n) - (size / 2.0 - 0.5)) / size
    t0 = np.floor(pos).astype(np.intp)
    wt = pos - t0
    t1 = t0 + 1
    t0c = np.clip(t0, 0, tiles - 1)
    t1c = np.clip(t1, 0, tiles - 1)
    wt = np.where(t0c == t1c, 0.0, wt)
    return t0c, t1c, wt


def clahe(img: np.ndarray, cfg: ClaheConfig = ClaheConfig()) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"clahe expects a gray [H, W] image, got {img.shape}")
    h, w = img.shape
    if h < cfg.tiles_y or w < cfg.tiles_x:
        raise DimensionError(f"image {h}x{w} is smaller than the {cfg.tiles_y}x{cfg.tiles_x} tile grid")
    th = -(-h // cfg.tiles_y)
    tw = -(-w // cfg.tiles_x)
    b = quantize(img, cfg.bins)
    padded = np.pad(b, ((0, th * cfg.tiles_y - h), (0, tw * cfg.tiles_x - w)), mode="edge")
    maps = np.empty((cfg.tiles_y, cfg.tiles_x, cfg.bins))
    for ty in range(cfg.tiles_y):
        for tx in range(cfg.tiles_x):
            tile = padded[ty * th : (ty + 1) * th, tx * tw : (tx + 1) * tw]
            maps[ty, tx] = tile_mapping(tile, cfg.clip_limit, cfg.bins)

    y0, y1, wy = _blend_axis(h, th, cfg.tiles_y)
    x0, x1, wx = _blend_axis(w, tw, cfg.tiles_x)
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    WY, WX = wy[:, None], wx[None, :]
    out = (1 - WY) * ((1 - WX) * maps[Y0, X0, b] + WX * maps[Y0, X1, b]) + WY * (
        (1 - WX) * maps[Y1, X0, b] + WX * maps[Y1, X1, b]
    )
    return np.clip(out, 0.0, 1.0)


def gamma_correct(img: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ContractError(f"gamma must be positive, got {gamma}")
    return np.power(np.asarray(img, dtype=np.float64), gamma)


def preprocess_pipeline(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig(), return_stages: bool = False):
    """Mix -> CLAHE -> gamma. A 2-d input is taken as already mixed to gray.

    With ``return_stages`` the result is ``(mixed, equalized, corrected)``.
    """
    img = np.asarray(img, dtype=np.float64)
    mixed = channel_mix(img) if img.ndim == 3 else np.clip(img, 0.0, 1.0)
    equalized = clahe(mixed, cfg.clahe)
    corrected = gamma_correct(equalized, cfg.gamma)
    if return_stages:
        return mixed, equalized, corrected
    return corrected
