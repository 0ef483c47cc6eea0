"""Confusion counts, ACC/SEN/SPE/F1 and rank-based AUC under an optional FOV mask.

Ratios with a zero denominator are reported as ``None`` rather than 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .tensor import ContractError, DimensionError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricsReport:
    acc: Optional[float] = None
    sen: Optional[float] = None
    spe: Optional[float] = None
    f1: Optional[float] = None
    auc: Optional[float] = None
    counts: Optional[ConfusionCounts] = None

    def as_row(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k != "counts"}
        c = self.counts or ConfusionCounts()
        return {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn, **row}


def _scope(shape, fov) -> np.ndarray:
    if fov is None:
        return np.ones(shape, dtype=bool)
    fov = np.asarray(fov)
    if fov.shape != shape:
        raise DimensionError(f"fov shape {fov.shape} != {shape}")
    return fov.astype(bool)


def confusion(pred, gt, fov=None) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    scope = _scope(gt.shape, fov)
    if not scope.any():
        raise ContractError("FOV excludes every pixel")
    p, g = pred[scope], gt[scope]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: float, den: float) -> Optional[float]:
    return num / den if den > 0 else None


def scalar_metrics(c: ConfusionCounts) -> tuple[Optional[float], ...]:
    """(ACC, SEN, SPE, F1) from confusion counts."""
    if c.total <= 0:
        raise ContractError("no pixels counted")
    acc = (c.tp + c.tn) / c.total
    sen = _ratio(c.tp, c.tp + c.fn)
    spe = _ratio(c.tn, c.tn + c.fp)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return acc, sen, spe, f1


def auc_from_scores(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie), via average ranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # 1-based average rank of each tie group
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], scores.size]
    group_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(scores.size)
    ranks[order] = np.repeat(group_rank, ends - starts)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(prob, gt, fov=None) -> Optional[float]:
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt)
    if prob.shape != gt.shape:
        raise DimensionError(f"probability map {prob.shape} and ground truth {gt.shape} differ")
    scope = _scope(gt.shape, fov)
    return auc_from_scores(prob[scope], gt[scope])


@dataclass
class ImageResult:
    """Per-image evaluation material: counts plus in-scope scores for AUC."""

    name: str
    counts: ConfusionCounts
    scores: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    labels: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0, dtype=bool))

    def report(self) -> MetricsReport:
        acc, sen, spe, f1 = scalar_metrics(self.counts)
        return MetricsReport(acc, sen, spe, f1, auc_from_scores(self.scores, self.labels) if self.scores.size else None, self.counts)


def evaluate_image(prob, gt, fov=None, threshold: float = 0.5, name: str = "") -> ImageResult:
    prob = np.asarray(prob, dtype=np.float64)
    counts = confusion(prob >= threshold, gt, fov)
    scope = _scope(np.shape(gt), fov)
    return ImageResult(name, counts, prob[scope], np.asarray(gt).astype(bool)[scope])


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(results: Sequence[ImageResult], mode: str = "pooled") -> MetricsReport:
    """Pool counts/scores across images ("pooled") or average per-image metrics ("mean")."""
    if not results:
        raise ContractError("nothing to aggregate")
    if mode == "pooled":
        counts = sum((r.counts for r in results), ConfusionCounts())
        pooled = ImageResult(
            "pooled",
            counts,
            np.concatenate([r.scores for r in results]),
            np.concatenate([r.labels for r in results]),
        )
        return pooled.report()
    if mode in ("mean", "per-image-mean"):
        reports = [r.report() for r in results]
        counts = sum((r.counts for r in results), ConfusionCounts())
        return MetricsReport(
            _mean(r.acc for r in reports),
            _mean(r.sen for r in reports),
            _mean(r.spe for r in reports),
            _mean(r.f1 for r in reports),
            _mean(r.auc for r in reports),
            counts,
        )
    raise ContractError(f"unknown aggregation mode {mode!r}")
