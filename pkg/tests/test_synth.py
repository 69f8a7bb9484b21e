import hashlib
import json

import numpy as np
import pytest

from chsnet.densitymap import load_annotations
from chsnet.noise import NoiseSpec
from chsnet.synth import SceneSpec, build_dataset, load_image, load_split, render_scene


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_empty_scene():
    img, ann = render_scene(SceneSpec(image_size=64, count_range=(0, 0), seed=1))
    assert ann.count() == 0
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8


def test_exact_count():
    _, ann = render_scene(SceneSpec(count_range=(50, 50), seed=2))
    assert ann.count() == 50


def test_render_deterministic():
    spec = SceneSpec(count_range=(10, 40), background_texture="gradient", seed=5)
    a, aa = render_scene(spec, 3)
    b, bb = render_scene(spec, 3)
    assert a.tobytes() == b.tobytes()
    assert aa.points.tobytes() == bb.points.tobytes()


@pytest.mark.parametrize("texture", ["flat", "gradient", "noise"])
def test_heads_are_visible(texture):
    spec = SceneSpec(count_range=(1, 1), head_radius_range=(4, 4), background_texture=texture, seed=0)
    img, ann = render_scene(spec)
    x, y = np.floor(ann.points[0] + 0.5).astype(int).clip(0, 127)
    # the head center differs clearly from the surrounding background
    ring = img[max(y - 9, 0), :, :].astype(float).mean()
    assert abs(img[y, x].astype(float).mean() - ring) > 10


def test_centers_do_not_coincide():
    _, ann = render_scene(SceneSpec(count_range=(80, 80), head_radius_range=(3, 5), seed=4))
    d = np.hypot(*(ann.points[:, None, :] - ann.points[None, :, :]).transpose(2, 0, 1))
    d[np.diag_indices(80)] = np.inf
    assert d.min() >= 3


def test_infeasible_placement_rejected():
    with pytest.raises(ValueError, match="cannot place"):
        render_scene(SceneSpec(image_size=64, count_range=(5000, 5000), head_radius_range=(4, 4)))


@pytest.mark.parametrize(
    "kw", [dict(image_size=32), dict(count_range=(5, 2)), dict(head_radius_range=(0, 1)),
           dict(background_texture="plaid")],
)
def test_scene_spec_validation(kw):
    with pytest.raises(ValueError):
        SceneSpec(**kw)


def test_clean_noise_gives_identical_training_labels(tmp_path):
    root = build_dataset(SceneSpec(image_size=64, count_range=(3, 9)), 3, 2, NoiseSpec(), tmp_path / "d")
    assert (root / "train.jsonl").read_text() == (root / "train_clean.jsonl").read_text()


def test_missing_rate_applies_exactly_to_training_only(tmp_path):
    spec = SceneSpec(image_size=128, count_range=(100, 100), head_radius_range=(2, 3), seed=1)
    root = build_dataset(spec, 4, 2, NoiseSpec(missing_rate=0.1, seed=3), tmp_path / "d")
    assert all(r.ann.count() == 90 for r in load_annotations(root / "train.jsonl"))
    assert all(r.ann.count() == 100 for r in load_annotations(root / "val.jsonl"))
    manifest = [json.loads(x) for x in (root / "noise_manifest.jsonl").read_text().splitlines()]
    assert len(manifest) == 4 and all(len(m["removed_indices"]) == 10 for m in manifest)


def test_dataset_cardinality_and_layout(tmp_path):
    root = build_dataset(SceneSpec(image_size=64, count_range=(1, 5)), 8, 4, NoiseSpec(0.2, 1.0, 0), tmp_path / "d")
    assert len(list((root / "images").glob("*.png"))) == 12
    n_records = sum(len(load_annotations(root / f)) for f in ("train.jsonl", "val.jsonl"))
    assert n_records == 12
    meta = json.loads((root / "dataset_meta.json").read_text())
    assert meta["n_train"] == 8 and meta["noise"]["missing_rate"] == 0.2 and meta["scene"]["image_size"] == 64
    img = load_image(root / "images" / "0000.png")
    assert img.shape == (3, 64, 64) and img.dtype == np.float32
    assert len(load_split(root, "val")) == 4


def test_regeneration_is_byte_identical(tmp_path):
    args = (SceneSpec(image_size=64, count_range=(2, 12), seed=9), 3, 2, NoiseSpec(0.3, 2.0, 4))
    a = build_dataset(*args, tmp_path / "a")
    b = build_dataset(*args, tmp_path / "b")
    assert tree_digest(a) == tree_digest(b)


def test_refuses_non_empty_target(tmp_path):
    target = tmp_path / "d"
    target.mkdir()
    (target / "keep.txt").write_text("x")
    with pytest.raises(FileExistsError):
        build_dataset(SceneSpec(image_size=64, count_range=(1, 2)), 1, 1, NoiseSpec(), target)
    build_dataset(SceneSpec(image_size=64, count_range=(1, 2)), 1, 1, NoiseSpec(), target, overwrite=True)
    assert not (target / "keep.txt").exists()


def test_rejects_empty_splits(tmp_path):
    with pytest.raises(ValueError):
        build_dataset(SceneSpec(), 0, 1, NoiseSpec(), tmp_path / "d")
