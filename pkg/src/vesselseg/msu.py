"""Multi-scale subtraction unit.

``F_out = Conv_out(|C1(A) - C1(B)| + |C3(A) - C3(B)| + |C5(A) - C5(B)|)``

The per-scale filters are shared between the two branches, so each difference
is evaluated as one convolution of ``A - B``; any per-scale bias would cancel
and is therefore not carried.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import Conv2d
from .tensor import DimensionError, Tensor

SCALES = (1, 3, 5)


@dataclass
class MsuBlock:
    scales: list[Conv2d]
    out: Conv2d

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, out_channels: int | None = None) -> "MsuBlock":
        out_channels = channels if out_channels is None else out_channels
        scales = [Conv2d.create(rng, channels, channels, k, bias=False) for k in SCALES]
        return cls(scales, Conv2d.create(rng, channels, out_channels, 3))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for k, conv in zip(SCALES, self.scales):
            params.update(conv.named_parameters(f"{prefix}.conv{k}"))
        params.update(self.out.named_parameters(f"{prefix}.out"))
        return params


def msu_forward(fa: Tensor, fb: Tensor, block: MsuBlock) -> Tensor:
    if fa.shape != fb.shape:
        raise DimensionError(f"MSU branches differ in shape: {fa.shape} vs {fb.shape}")
    diff = ops.sub(fa, fb)
    total = None
    for conv in block.scales:
        term = ops.abs(ops.conv2d(diff, conv.weight, None, pad=(conv.kernel - 1) // 2))
        total = term if total is None else ops.add(total, term)
    return block.out(total)
