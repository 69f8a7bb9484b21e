"""Point annotations and ground-truth density maps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class PointAnnotations:
    """Head-center coordinates for one image, in input pixel units."""

    points: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 2), dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must have shape (N, 2), got {pts.shape}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        out = (pts[:, 0] < 0) | (pts[:, 0] >= self.image_width) | (pts[:, 1] < 0) | (pts[:, 1] >= self.image_height)
        if np.any(out):
            i = int(np.flatnonzero(out)[0])
            raise ValueError(
                f"point {i} at ({pts[i, 0]}, {pts[i, 1]}) outside "
                f"{self.image_width}x{self.image_height} image"
            )
        self.points = pts

    def count(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DensityMap:
    grid: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValueError(f"density grid must be 2-D, got shape {self.grid.shape}")
        if self.stride <= 0:
            raise ValueError("stride must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def gaussian_window(kernel_size: int, sigma: float) -> np.ndarray:
    """Un-normalized ``kernel_size x kernel_size`` Gaussian centered on the middle cell."""
    if kernel_size <= 0 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(d**2) / (2.0 * sigma**2))
    return np.outer(g, g)


def snap_to_pixel(points: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest pixel index (col, row) for each point."""
    idx = np.floor(np.asarray(points, dtype=np.float64) + 0.5).astype(np.int64)
    if len(idx):
        idx[:, 0] = np.clip(idx[:, 0], 0, width - 1)
        idx[:, 1] = np.clip(idx[:, 1], 0, height - 1)
    return idx.reshape(-1, 2)


def generate_density_map(
    ann: PointAnnotations, kernel_size: int = 15, sigma: float = 4.0, stride: int = 1
) -> DensityMap:
    """Render a density map from point annotations.

    Every point deposits a Gaussian window centered at its nearest pixel. The
    part of the window that falls inside the image is rescaled to unit mass,
    so the map integrates to exactly the point count even at the borders. The
    full-resolution map is then block-summed down by ``stride``.
    """
    window = gaussian_window(kernel_size, sigma)
    if stride <= 0:
        raise ValueError("stride must be positive")
    w, h = ann.image_width, ann.image_height
    if w % stride or h % stride:
        raise ValueError(f"stride {stride} does not divide image size {w}x{h}")
    r = kernel_size // 2
    grid = np.zeros((h, w), dtype=np.float64)
    for cx, cy in snap_to_pixel(ann.points, w, h):
        x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
        y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
        patch = window[y0 - (cy - r) : y1 - (cy - r), x0 - (cx - r) : x1 - (cx - r)]
        grid[y0:y1, x0:x1] += patch / patch.sum()
    return count_preserving_downsample(DensityMap(grid, 1), stride)


def count_preserving_downsample(dmap: DensityMap, factor: int) -> DensityMap:
    """Block-sum ``factor x factor`` cells into one."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    h, w = dmap.grid.shape
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide map size {h}x{w}")
    if factor == 1:
        return DensityMap(dmap.grid.copy(), dmap.stride)
    out = dmap.grid.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return DensityMap(out, dmap.stride * factor)


def total_count(dmap: DensityMap | np.ndarray) -> float:
    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    return float(grid.sum())


# --- annotation files -------------------------------------------------------


class AnnotationFormatError(ValueError):
    pass


@dataclass
class AnnotationRecord:
    image: str
    ann: PointAnnotations
    extra: dict = field(default_factory=dict)


def _parse_record(line: str, lineno: int, path: str, sizes: dict | None) -> AnnotationRecord:
    where = f"{path}:{lineno}"
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise AnnotationFormatError(f"{where}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise AnnotationFormatError(f"{where}: record must be an object")
    image = rec.get("image")
    if not isinstance(image, str) or not image:
        raise AnnotationFormatError(f"{where}: missing or empty 'image' field")
    points = rec.get("points")
    if not isinstance(points, list):
        raise AnnotationFormatError(f"{where}: 'points' must be a list of [x, y]")
    for j, p in enumerate(points):
        if (
            not isinstance(p, (list, tuple))
            or len(p) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p)
        ):
            raise AnnotationFormatError(f"{where}: point {j} is not a pair of numbers: {p!r}")
    width, height = rec.get("width"), rec.get("height")
    if (width is None or height is None) and sizes is not None and image in sizes:
        width, height = sizes[image]
    if not isinstance(width, int) or not isinstance(height, int):
        raise AnnotationFormatError(f"{where}: integer 'width' and 'height' required")
    try:
        ann = PointAnnotations(np.array(points, dtype=np.float64).reshape(-1, 2), width, height)
    except ValueError as exc:
        raise AnnotationFormatError(f"{where}: {exc}") from None
    extra = {k: v for k, v in rec.items() if k not in ("image", "points", "width", "height")}
    return AnnotationRecord(image, ann, extra)


def load_annotations(path: str | Path, sizes: dict | None = None) -> list[AnnotationRecord]:
    """Read one JSON record per line. ``sizes`` maps image -> (width, height) when records omit them."""
    path = Path(path)
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            records.append(_parse_record(line, lineno, str(path), sizes))
    return records


def dump_record(image: str, ann: PointAnnotations, **extra) -> str:
    rec = {
        "image": image,
        "width": ann.image_width,
        "height": ann.image_height,
        "points": [[float(x), float(y)] for x, y in ann.points],
    }
    rec.update(extra)
    return json.dumps(rec)


def save_annotations(path: str | Path, records: list[AnnotationRecord]) -> None:
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(dump_record(r.image, r.ann, **r.extra) + "\n")
