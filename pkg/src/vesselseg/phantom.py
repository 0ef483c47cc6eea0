"""Seeded synthetic fundus-like phantoms with vessel labels and field-of-view masks.

Vessel trees are grown from quadratic Bezier segments whose width tapers along
each branch. Segments are added breadth-first until the labelled fraction of
the image lands inside ``target_vessel_fraction``; a segment that would
overshoot the range is discarded. The image is a smooth illumination field,
darkened by ``vessel_contrast`` on vessel pixels, optionally brightened by an
optic-disc-like occluder, plus Gaussian noise.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

MAX_ATTEMPTS = 100


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple[int, int] = (256, 256)
    n_trees: int = 3
    width_range: tuple[float, float] = (1.0, 20.0)
    vessel_contrast: float = 0.06
    noise_sigma: float = 0.01
    occluder: bool = False
    target_vessel_fraction: tuple[float, float] = (0.070, 0.086)
    background_variation: float = 0.04
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.width_range
        if not 1.0 <= lo <= hi <= 20.0:
            raise ValueError(f"width_range must lie within [1, 20], got {self.width_range}")
        flo, fhi = self.target_vessel_fraction
        if not 0.0 < flo <= fhi < 1.0:
            raise ValueError(f"target_vessel_fraction must lie in (0, 1), got {self.target_vessel_fraction}")
        if min(self.size) < 8:
            raise ValueError("phantom must be at least 8x8")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")


@dataclass
class PhantomSample:
    image: np.ndarray  # [H, W] float64 in [0, 1]
    label: np.ndarray  # [H, W] uint8 in {0, 1}
    fov: np.ndarray  # [H, W] uint8 in {0, 1}
    seed: int = 0

    @property
    def vessel_fraction(self) -> float:
        return float(self.label.mean())


@dataclass
class PhantomDataset:
    train: list[PhantomSample] = field(default_factory=list)
    test: list[PhantomSample] = field(default_factory=list)


def fov_disc(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r = min(h, w) / 2.0
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(np.uint8)


@dataclass
class _Segment:
    start: np.ndarray
    angle: float
    width: float
    depth: int


def _bezier(p0, p1, p2, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _paint(mask: np.ndarray, pts: np.ndarray, radii: np.ndarray) -> None:
    h, w = mask.shape
    rmax = radii.max()
    y_lo = max(int(np.floor(pts[:, 0].min() - rmax)), 0)
    y_hi = min(int(np.ceil(pts[:, 0].max() + rmax)) + 1, h)
    x_lo = max(int(np.floor(pts[:, 1].min() - rmax)), 0)
    x_hi = min(int(np.ceil(pts[:, 1].max() + rmax)) + 1, w)
    if y_lo >= y_hi or x_lo >= x_hi:
        return
    yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    hit = np.zeros(yy.shape, dtype=bool)
    for chunk in range(0, len(pts), 64):
        p = pts[chunk : chunk + 64]
        r2 = radii[chunk : chunk + 64] ** 2 + 1e-9
        d2 = (yy[None] - p[:, 0, None, None]) ** 2 + (xx[None] - p[:, 1, None, None]) ** 2
        hit |= (d2 <= r2[:, None, None]).any(axis=0)
    mask[y_lo:y_hi, x_lo:x_hi] |= hit


def _grow_label(spec: PhantomSpec, rng: np.random.Generator, fov: np.ndarray, occ_center) -> Optional[np.ndarray]:
    h, w = spec.size
    scale = min(h, w)
    w_lo, w_hi = spec.width_range
    f_lo, f_hi = spec.target_vessel_fraction
    # keep root widths plausible for the image size
    root_hi = min(w_hi, max(w_lo, scale / 20.0))
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    radius = scale / 2.0

    queue: deque[_Segment] = deque()
    for _ in range(spec.n_trees):
        if occ_center is not None:
            start = occ_center + rng.normal(0.0, 0.03 * scale, 2)
        else:
            rr = radius * 0.55 * np.sqrt(rng.random())
            phi = rng.uniform(0, 2 * np.pi)
            start = centre + rr * np.array([np.sin(phi), np.cos(phi)])
        width = rng.uniform(max(w_lo, 0.6 * root_hi), root_hi)
        queue.append(_Segment(start, rng.uniform(0, 2 * np.pi), width, 0))

    label = np.zeros((h, w), dtype=bool)
    total = float(h * w)
    while queue:
        seg = queue.popleft()
        length = rng.uniform(0.08, 0.2) * scale
        direction = np.array([np.sin(seg.angle), np.cos(seg.angle)])
        normal = np.array([direction[1], -direction[0]])
        end = seg.start + length * direction
        ctrl = (seg.start + end) / 2.0 + rng.uniform(-0.3, 0.3) * length * normal
        end_width = max(w_lo, seg.width * rng.uniform(0.75, 0.9))
        n_pts = max(int(np.ceil(2 * length)) + 1, 2)
        pts = _bezier(seg.start, ctrl, end, n_pts)
        radii = np.maximum(np.linspace(seg.width, end_width, n_pts) / 2.0, 0.5)

        trial = label.copy()
        _paint(trial, pts, radii)
        trial &= fov.astype(bool)
        frac = trial.sum() / total
        if frac > f_hi:
            continue
        label = trial
        if frac >= f_lo:
            return label
        if seg.depth >= 12:
            continue
        tangent = end - ctrl
        heading = float(np.arctan2(tangent[0], tangent[1]))
        queue.append(_Segment(end, heading + rng.normal(0.0, 0.2), end_width, seg.depth + 1))
        if rng.random() < 0.7:
            side = rng.choice([-1.0, 1.0])
            branch_w = max(w_lo, end_width * rng.uniform(0.55, 0.8))
            queue.append(_Segment(end, heading + side * np.deg2rad(rng.uniform(25, 60)), branch_w, seg.depth + 1))
    return None


def _smooth_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    yy = yy / max(h - 1, 1)
    xx = xx / max(w - 1, 1)
    field_ = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.2, 2)
        py, px = rng.uniform(0, 2 * np.pi, 2)
        field_ += np.cos(2 * np.pi * fy * yy + py) * np.cos(2 * np.pi * fx * xx + px)
    return field_ / 3.0


def generate(spec: PhantomSpec) -> PhantomSample:
    """Generate one phantom; identical specs give bitwise-identical samples."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    fov = fov_disc(h, w)
    scale = min(h, w)
    occ_center = None
    if spec.occluder:
        rr = scale / 2.0 * 0.5 * np.sqrt(rng.random())
        phi = rng.uniform(0, 2 * np.pi)
        occ_center = np.array([(h - 1) / 2.0, (w - 1) / 2.0]) + rr * np.array([np.sin(phi), np.cos(phi)])

    label = None
    for _ in range(MAX_ATTEMPTS):
        label = _grow_label(spec, rng, fov, occ_center)
        if label is not None:
            break
    if label is None:
        raise GenerationError(f"could not reach vessel fraction {spec.target_vessel_fraction} in {MAX_ATTEMPTS} attempts")

    base = rng.uniform(0.40, 0.55)
    image = base + spec.background_variation * _smooth_field(rng, h, w)
    if occ_center is not None:
        yy, xx = np.mgrid[:h, :w]
        d = np.sqrt((yy - occ_center[0]) ** 2 + (xx - occ_center[1]) ** 2)
        r_occ = 0.12 * scale
        image += 0.25 * np.clip((1.5 * r_occ - d) / (0.5 * r_occ), 0.0, 1.0)
    image -= spec.vessel_contrast * label
    image += rng.normal(0.0, spec.noise_sigma, (h, w))
    np.clip(image, 0.0, 1.0, out=image)
    return PhantomSample(image=image, label=label.astype(np.uint8), fov=fov, seed=spec.seed)


def derived_seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def dataset(spec: PhantomSpec, count: int, seed: int, train_fraction: float = 0.8) -> PhantomDataset:
    """``count`` phantoms with per-sample derived seeds; the first ``round(count*train_fraction)`` train."""
    if count < 2:
        raise ValueError("dataset needs count >= 2")
    samples = [generate(replace(spec, seed=s)) for s in derived_seeds(seed, count)]
    n_train = int(round(count * train_fraction))
    n_train = min(max(n_train, 1), count - 1)
    return PhantomDataset(train=samples[:n_train], test=samples[n_train:])
