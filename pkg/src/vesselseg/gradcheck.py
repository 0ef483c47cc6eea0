"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tensor, backward, no_grad


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Return the worst relative error between analytic and numeric gradients.

    ``fn(*inputs)`` must return a scalar tensor. Every input that requires a
    gradient is perturbed coordinate by coordinate; the error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    if loss.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(loss)

    worst = 0.0
    with no_grad():
        for t in inputs:
            if not t.requires_grad:
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = fn(*inputs).item()
                flat[i] = orig - eps
                f_minus = fn(*inputs).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst
