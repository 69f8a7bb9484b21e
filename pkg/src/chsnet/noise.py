"""Synthetic annotation noise: missing annotations and location shifts.

All randomness comes from numpy's ``Generator`` with the PCG64 bit generator,
seeded explicitly, so a given (annotations, seed) pair always yields the same
corruption.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .densitymap import PointAnnotations


@dataclass(frozen=True)
class NoiseSpec:
    missing_rate: float = 0.0
    shift_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ValueError(f"missing_rate must be in [0, 1], got {self.missing_rate}")
        if self.shift_sigma < 0:
            raise ValueError(f"shift_sigma must be >= 0, got {self.shift_sigma}")

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def inject_missing(ann: PointAnnotations, rate: float, seed) -> tuple[PointAnnotations, list[int]]:
    """Drop exactly ``floor(rate * N)`` points, chosen uniformly without replacement."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"missing rate must be in [0, 1], got {rate}")
    n = ann.count()
    k = math.floor(Fraction(rate).limit_denominator(10**6) * n)  # 0.29 * 100 == 28.999...
    removed = np.sort(_rng(seed).choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    keep = np.ones(n, dtype=bool)
    keep[removed] = False
    out = PointAnnotations(ann.points[keep], ann.image_width, ann.image_height)
    return out, [int(i) for i in removed]


def shift_offsets(n: int, sigma: float, seed) -> np.ndarray:
    """Raw (unclamped) per-point Gaussian displacements, shape (n, 2)."""
    if sigma < 0:
        raise ValueError(f"shift sigma must be >= 0, got {sigma}")
    if sigma == 0 or n == 0:
        return np.zeros((n, 2))
    return _rng(seed).normal(0.0, sigma, size=(n, 2))


def inject_shift(ann: PointAnnotations, sigma: float, seed) -> PointAnnotations:
    """Displace every point by an isotropic Gaussian offset, then clamp to the pixel grid."""
    offsets = shift_offsets(ann.count(), sigma, seed)
    if sigma == 0:
        return PointAnnotations(ann.points.copy(), ann.image_width, ann.image_height)
    pts = ann.points + offsets
    pts[:, 0] = np.clip(pts[:, 0], 0.0, ann.image_width - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, ann.image_height - 1)
    return PointAnnotations(pts, ann.image_width, ann.image_height)


def corrupt(ann: PointAnnotations, spec: NoiseSpec, index: int = 0) -> tuple[PointAnnotations, dict]:
    """Apply missing annotations then shifts to one image.

    ``index`` decorrelates images sharing one spec. Returns the corrupted
    annotations and a manifest entry with the removed indices and the applied
    (post-clamp) displacement of each surviving point.
    """
    dropped, removed = inject_missing(ann, spec.missing_rate, [spec.seed, index, 0])
    shifted = inject_shift(dropped, spec.shift_sigma, [spec.seed, index, 1])
    applied = shifted.points - dropped.points
    manifest = {
        "removed_indices": removed,
        "applied_shifts": [[float(dx), float(dy)] for dx, dy in applied],
    }
    return shifted, manifest
