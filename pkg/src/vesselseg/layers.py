"""Parameterised building blocks shared by the network modules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .tensor import Tensor, parameter


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """He-uniform: U[-s, s] with s = sqrt(6 / fan_in), fan_in = C_in * k * k.

    Variance 2 / fan_in keeps activation scale constant through ReLU layers.
    """
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    s = np.sqrt(6.0 / fan_in)
    return rng.uniform(-s, s, size=shape)


@dataclass
class Conv2d:
    weight: Tensor
    bias: Optional[Tensor]

    @classmethod
    def create(cls, rng: np.random.Generator, c_in: int, c_out: int, k: int, bias: bool = True) -> "Conv2d":
        w = parameter(uniform_fan_in(rng, (c_out, c_in, k, k)))
        b = None
        if bias:
            s = np.sqrt(1.0 / (c_in * k * k))
            b = parameter(rng.uniform(-s, s, size=c_out))
        return cls(w, b)

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, pad=(self.kernel - 1) // 2)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out
