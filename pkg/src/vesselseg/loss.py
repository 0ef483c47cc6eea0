"""Class-weighted soft-Dice + binary cross-entropy loss with deep-supervision aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .tensor import ContractError, DimensionError, Tensor


@dataclass(frozen=True)
class LossConfig:
    w0: float = 0.9  # background
    w1: float = 0.1  # vessel
    eps: float = 1e-7
    # "product": 2*sum(p*g); "difference": 2*sum(g - p), the literal printed form
    dice_numerator: str = "product"

    def __post_init__(self):
        if self.w0 < 0 or self.w1 < 0:
            raise ContractError("class weights must be non-negative")
        if not 0 < self.eps < 0.01:
            raise ContractError("eps must lie in (0, 0.01)")
        if self.dice_numerator not in ("product", "difference"):
            raise ContractError(f"unknown dice numerator {self.dice_numerator!r}")


def class_terms(p: Tensor, g: np.ndarray, k: int, mask: np.ndarray, cfg: LossConfig) -> tuple[Tensor, Tensor]:
    """(soft dice, BCE) of class ``k`` over the pixels where ``mask`` is 1."""
    n = float(mask.sum())
    pk = p if k == 1 else ops.add(ops.scale(p, -1.0), 1.0)
    gk = g if k == 1 else 1.0 - g
    sum_p = ops.sum(ops.mul(pk, Tensor(mask)))
    sum_g = Tensor(np.asarray((gk * mask).sum()))
    if cfg.dice_numerator == "product":
        num = ops.sum(ops.mul(pk, Tensor(gk * mask)))
    else:
        num = ops.sub(sum_g, sum_p)
    dice = ops.add(ops.scale(ops.div(num, ops.add(sum_p, sum_g)), -2.0), 1.0)

    pc = ops.clip(pk, cfg.eps, 1.0 - cfg.eps)
    log_p = ops.log(pc)
    log_q = ops.log(ops.add(ops.scale(pc, -1.0), 1.0))
    ll = ops.add(ops.mul(log_p, Tensor(gk * mask)), ops.mul(log_q, Tensor((1.0 - gk) * mask)))
    bce = ops.scale(ops.sum(ll), -1.0 / n)
    return dice, bce


def weighted_joint_loss(
    p: Tensor, g: np.ndarray, fov: Optional[np.ndarray] = None, cfg: LossConfig = LossConfig()
) -> Tensor:
    """``sum_k W_k * (dice_k / 2 + bce_k / 2)`` over in-scope pixels."""
    g = np.asarray(g, dtype=np.float64).reshape(p.shape)
    mask = np.ones(p.shape) if fov is None else np.asarray(fov, dtype=np.float64).reshape(p.shape)
    if mask.sum() == 0:
        raise ContractError("loss scope is empty")
    total = None
    for k, wk in ((0, cfg.w0), (1, cfg.w1)):
        dice, bce = class_terms(p, g, k, mask, cfg)
        term = ops.scale(ops.add(dice, bce), 0.5 * wk)
        total = term if total is None else ops.add(total, term)
    return total


def combined_supervision_loss(
    maps: Sequence[Tensor],
    g: np.ndarray,
    fov: Optional[np.ndarray] = None,
    cfg: LossConfig = LossConfig(),
    weights: Optional[Sequence[float]] = None,
) -> Tensor:
    if not maps:
        raise ContractError("no maps to supervise")
    if weights is None:
        weights = [1.0 / len(maps)] * len(maps)
    if len(weights) != len(maps):
        raise ContractError(f"{len(maps)} maps but {len(weights)} weights")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ContractError("supervision weights must sum to 1")
    for m in maps[1:]:
        if m.shape != maps[0].shape:
            raise DimensionError("supervised maps differ in shape")
    total = None
    for m, w in zip(maps, weights):
        term = ops.scale(weighted_joint_loss(m, g, fov, cfg), w)
        total = term if total is None else ops.add(total, term)
    return total
