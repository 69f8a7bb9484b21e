"""Synthetic crowd scenes with exactly known head positions, and the on-disk dataset layout.

Layout of a dataset directory::

    images/NNNN.png        8-bit RGB, train images first then validation
    train.jsonl            training annotations (corrupted by the noise spec)
    train_clean.jsonl      training annotations before corruption
    val.jsonl              validation annotations (always clean)
    noise_manifest.jsonl   per training image: removed_indices, applied_shifts
    dataset_meta.json      scene spec, noise spec, split sizes
"""

from __future__ import annotations

import json
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .densitymap import AnnotationRecord, PointAnnotations, dump_record, load_annotations
from .noise import NoiseSpec, corrupt

TEXTURES = ("flat", "gradient", "noise")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    count_range: tuple[int, int] = (20, 60)
    head_radius_range: tuple[float, float] = (2.5, 4.5)
    background_texture: str = "noise"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "count_range", tuple(int(v) for v in self.count_range))
        object.__setattr__(self, "head_radius_range", tuple(float(v) for v in self.head_radius_range))
        if self.image_size < 64:
            raise ValueError(f"image_size must be >= 64, got {self.image_size}")
        lo, hi = self.count_range
        if lo < 0 or lo > hi:
            raise ValueError(f"invalid count_range {self.count_range}")
        rlo, rhi = self.head_radius_range
        if rlo <= 0 or rlo > rhi:
            raise ValueError(f"invalid head_radius_range {self.head_radius_range}")
        if self.background_texture not in TEXTURES:
            raise ValueError(f"background_texture must be one of {TEXTURES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["count_range"] = list(self.count_range)
        d["head_radius_range"] = list(self.head_radius_range)
        return d


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    base = rng.uniform(0.55, 0.85, size=3)
    img = np.broadcast_to(base[:, None, None], (3, s, s)).copy()
    if spec.background_texture == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:s, 0:s] / (s - 1)
        ramp = np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)
        img += 0.15 * ramp[None]
    elif spec.background_texture == "noise":
        img += rng.normal(0.0, 0.04, size=(3, s, s))
    return img


def _place_centers(spec: SceneSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    min_sep = spec.head_radius_range[0]
    # hexagonal packing bound for disks of diameter min_sep
    capacity = int(s * s / (0.8660254 * min_sep**2))
    if n > capacity:
        raise ValueError(
            f"cannot place {n} heads with center spacing {min_sep:g}px in a {s}x{s} image "
            f"(packing bound ~{capacity})"
        )
    centers = np.zeros((0, 2))
    attempts = 0
    max_attempts = 200 * max(n, 1)
    while len(centers) < n:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError(
                f"placement failed: only {len(centers)} of {n} heads placed after "
                f"{max_attempts} attempts (image {s}x{s}, spacing {min_sep:g}px)"
            )
        c = rng.uniform(0, s, size=2)
        if len(centers) and np.min(np.hypot(*(centers - c).T)) < min_sep:
            continue
        centers = np.vstack([centers, c])
    return centers


def _draw_head(img: np.ndarray, cx: float, cy: float, rng: np.random.Generator, spec: SceneSpec) -> None:
    s = spec.image_size
    r = rng.uniform(*spec.head_radius_range)
    aspect = rng.uniform(0.8, 1.25)
    theta = rng.uniform(0, np.pi)
    contrast = rng.uniform(0.35, 0.7)
    tint = rng.uniform(0.0, 0.25, size=3)
    ext = int(np.ceil(r * max(aspect, 1.0) + 2))
    x0, x1 = max(int(cx) - ext, 0), min(int(cx) + ext + 2, s)
    y0, y1 = max(int(cy) - ext, 0), min(int(cy) + ext + 2, s)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    # pixel centers sit at integer coordinates
    dx, dy = xx - cx, yy - cy
    u = (np.cos(theta) * dx + np.sin(theta) * dy) / (r * aspect)
    v = (-np.sin(theta) * dx + np.cos(theta) * dy) / r
    rho = np.sqrt(u**2 + v**2)
    # soft edge: 1 inside, linear falloff over the outer 30% of the radius
    alpha = np.clip((1.3 - rho) / 0.6, 0.0, 1.0)
    target = img[:, y0:y1, x0:x1] * (1.0 - contrast) + tint[:, None, None] * contrast
    img[:, y0:y1, x0:x1] = img[:, y0:y1, x0:x1] * (1.0 - alpha) + target * alpha


def render_scene(spec: SceneSpec, index: int = 0) -> tuple[np.ndarray, PointAnnotations]:
    """Render one scene. Returns a uint8 ``(H, W, 3)`` image and its exact head centers."""
    rng = np.random.Generator(np.random.PCG64([spec.seed, index]))
    lo, hi = spec.count_range
    n = int(rng.integers(lo, hi + 1))
    img = _background(spec, rng)
    centers = _place_centers(spec, n, rng)
    for cx, cy in centers:
        _draw_head(img, cx, cy, rng, spec)
    out = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    return out, PointAnnotations(centers, spec.image_size, spec.image_size)


def build_dataset(
    spec: SceneSpec,
    n_train: int,
    n_val: int,
    noise: NoiseSpec,
    root: str | Path,
    overwrite: bool = False,
) -> Path:
    if n_train <= 0 or n_val <= 0:
        raise ValueError("n_train and n_val must be positive")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{root} exists and is not empty (pass overwrite to replace it)")
        shutil.rmtree(root)
    (root / "images").mkdir(parents=True, exist_ok=True)

    train_lines, clean_lines, val_lines, manifest_lines = [], [], [], []
    for i in range(n_train + n_val):
        img, ann = render_scene(spec, i)
        name = f"images/{i:04d}.png"
        Image.fromarray(img, mode="RGB").save(root / name)
        if i < n_train:
            noisy, entry = corrupt(ann, noise, i)
            clean_lines.append(dump_record(name, ann))
            train_lines.append(dump_record(name, noisy))
            manifest_lines.append(json.dumps({"image": name, **entry}))
        else:
            val_lines.append(dump_record(name, ann))

    for fname, lines in (
        ("train.jsonl", train_lines),
        ("train_clean.jsonl", clean_lines),
        ("val.jsonl", val_lines),
        ("noise_manifest.jsonl", manifest_lines),
    ):
        (root / fname).write_text("".join(line + "\n" for line in lines))
    meta = {
        "scene": spec.to_dict(),
        "noise": noise.to_dict(),
        "n_train": n_train,
        "n_val": n_val,
    }
    (root / "dataset_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def load_image(path: str | Path) -> np.ndarray:
    """Read an RGB image as a float32 ``(3, H, W)`` array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_split(root: str | Path, split: str) -> list[tuple[np.ndarray, AnnotationRecord]]:
    """Load ``(image, record)`` pairs for ``split`` in {train, train_clean, val}."""
    root = Path(root)
    path = root / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no annotation file {path}")
    return [(load_image(root / rec.image), rec) for rec in load_annotations(path)]
