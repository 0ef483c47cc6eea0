"""8-bit PNG / PGM reading and writing (values mapped v <-> v/255)."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

PathLike = Union[str, Path]


def read_image(path: PathLike) -> np.ndarray:
    """Gray files give ``[H, W]``, colour files ``[H, W, 3]``, both float64 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("L", "1", "P", "I;16", "I"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_gray(path: PathLike) -> np.ndarray:
    arr = read_image(path)
    if arr.ndim == 3:
        from .preprocess import channel_mix

        arr = channel_mix(arr)
    return arr


def read_mask(path: PathLike) -> np.ndarray:
    return (read_gray(path) >= 0.5).astype(np.uint8)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_gray(path: PathLike, img: np.ndarray) -> None:
    """Write a gray image; the format follows the suffix (``.png`` or ``.pgm``)."""
    path = Path(path)
    im = Image.fromarray(to_uint8(img), mode="L")
    if path.suffix.lower() == ".pgm":
        im.save(path, format="PPM")
    else:
        im.save(path, format="PNG")


def write_mask(path: PathLike, mask: np.ndarray) -> None:
    write_gray(path, np.asarray(mask, dtype=np.float64))
