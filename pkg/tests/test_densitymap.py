import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chsnet.densitymap import (
    AnnotationFormatError,
    AnnotationRecord,
    DensityMap,
    PointAnnotations,
    count_preserving_downsample,
    generate_density_map,
    load_annotations,
    save_annotations,
    total_count,
)


def brute_force_map(points, width, height, kernel_size, sigma, stride):
    """Independent reference: explicit per-pixel loops, no array slicing."""
    r = kernel_size // 2
    full = [[0.0] * width for _ in range(height)]
    for x, y in points:
        cx = min(int(math.floor(x + 0.5)), width - 1)
        cy = min(int(math.floor(y + 0.5)), height - 1)
        cells = []
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                px, py = cx + dx, cy + dy
                if 0 <= px < width and 0 <= py < height:
                    cells.append((px, py, math.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))))
        z = sum(v for _, _, v in cells)
        for px, py, v in cells:
            full[py][px] += v / z
    out = np.zeros((height // stride, width // stride))
    for py in range(height):
        for px in range(width):
            out[py // stride, px // stride] += full[py][px]
    return out


def interior_points(rng, n, size, margin=8):
    return rng.uniform(margin, size - margin, size=(n, 2))


def test_single_point_unit_mass():
    dm = generate_density_map(PointAnnotations([[32, 32]], 64, 64), 15, 4.0, 1)
    assert dm.grid.shape == (64, 64)
    assert abs(total_count(dm) - 1.0) <= 1e-6


def test_no_points_gives_zero_map():
    dm = generate_density_map(PointAnnotations([], 64, 64), 15, 4.0, 8)
    assert dm.grid.shape == (8, 8)
    assert not dm.grid.any()


def test_three_points_stride8_matches_brute_force():
    pts = [[30.2, 40.7], [64.0, 64.0], [100.5, 20.4]]
    dm = generate_density_map(PointAnnotations(pts, 128, 128), 15, 4.0, 8)
    ref = brute_force_map(pts, 128, 128, 15, 4.0, 8)
    assert dm.stride == 8
    np.testing.assert_allclose(dm.grid, ref, rtol=0, atol=1e-12)
    assert abs(total_count(dm) - 3.0) <= 1e-3


def test_border_point_keeps_unit_mass():
    dm = generate_density_map(PointAnnotations([[0, 0], [63.9, 10]], 64, 64), 15, 4.0, 4)
    assert total_count(dm) == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_allclose(dm.grid, brute_force_map([[0, 0], [63.9, 10]], 64, 64, 15, 4.0, 4), atol=1e-12)


def test_downsample_block_sums():
    out = count_preserving_downsample(DensityMap(np.full((4, 4), 0.25)), 2)
    np.testing.assert_array_equal(out.grid, np.ones((2, 2)))
    assert out.stride == 2


def test_downsample_factor_one_is_identity(rng):
    g = rng.random((6, 10))
    out = count_preserving_downsample(DensityMap(g), 1)
    np.testing.assert_array_equal(out.grid, g)


def test_downsample_preserves_sum(rng):
    g = rng.random((8, 8))
    out = count_preserving_downsample(DensityMap(g), 4)
    # reference total accumulated column-major, opposite to numpy's order
    ref = 0.0
    for j in range(8):
        for i in range(8):
            ref += g[i, j]
    assert out.grid.shape == (2, 2)
    assert abs(out.grid.sum() - ref) <= 1e-9 * ref


def test_downsample_rejects_non_divisible():
    with pytest.raises(ValueError):
        count_preserving_downsample(DensityMap(np.zeros((6, 8))), 4)


def test_total_count_examples(rng):
    assert total_count(DensityMap(np.zeros((4, 4)))) == 0
    pts = interior_points(rng, 5, 128)
    dm = generate_density_map(PointAnnotations(pts, 128, 128), 15, 4.0, 1)
    ref = brute_force_map(pts, 128, 128, 15, 4.0, 1)
    assert abs(total_count(dm) - ref.sum()) <= 1e-9
    assert abs(total_count(dm) - 5.0) <= 1e-3
    assert total_count(count_preserving_downsample(dm, 8)) == pytest.approx(total_count(dm), rel=1e-12)


@pytest.mark.parametrize(
    "pts,w,h",
    [([[64, 3]], 64, 64), ([[-0.1, 3]], 64, 64), ([[3, 64.5]], 64, 64)],
)
def test_rejects_out_of_bounds(pts, w, h):
    with pytest.raises(ValueError):
        PointAnnotations(pts, w, h)


def test_rejects_even_kernel():
    with pytest.raises(ValueError):
        generate_density_map(PointAnnotations([[5, 5]], 16, 16), 14, 4.0, 1)


def test_rejects_stride_not_dividing_image():
    with pytest.raises(ValueError):
        generate_density_map(PointAnnotations([[5, 5]], 20, 16), 15, 4.0, 8)


@settings(max_examples=40, deadline=None)
@given(
    pts=st.lists(st.tuples(st.floats(8, 119.99), st.floats(8, 119.99)), max_size=30),
    stride=st.sampled_from([1, 2, 4, 8]),
)
def test_mass_conservation_and_nonnegativity(pts, stride):
    ann = PointAnnotations(np.array(pts).reshape(-1, 2), 128, 128)
    dm = generate_density_map(ann, 15, 4.0, stride)
    assert dm.grid.min() >= 0
    n = len(pts)
    assert abs(total_count(dm) - n) <= 1e-3 * max(n, 1)


@settings(max_examples=30, deadline=None)
@given(x=st.integers(10, 50), y=st.integers(10, 50), dx=st.integers(-3, 3), dy=st.integers(-3, 3))
def test_translation_covariance(x, y, dx, dy):
    a = generate_density_map(PointAnnotations([[x, y]], 64, 64), 15, 4.0, 1).grid
    b = generate_density_map(PointAnnotations([[x + dx, y + dy]], 64, 64), 15, 4.0, 1).grid
    np.testing.assert_array_equal(np.roll(a, (dy, dx), axis=(0, 1)), b)


def test_determinism(rng):
    ann = PointAnnotations(interior_points(rng, 20, 128), 128, 128)
    a = generate_density_map(ann, 15, 4.0, 8).grid
    b = generate_density_map(ann, 15, 4.0, 8).grid
    assert a.tobytes() == b.tobytes()


def test_annotation_file_round_trip(tmp_path):
    recs = [
        AnnotationRecord("images/0000.png", PointAnnotations([[1.5, 2.25], [10, 11]], 32, 32)),
        AnnotationRecord("images/0001.png", PointAnnotations([], 32, 16)),
    ]
    path = tmp_path / "ann.jsonl"
    save_annotations(path, recs)
    back = load_annotations(path)
    assert [r.image for r in back] == ["images/0000.png", "images/0001.png"]
    np.testing.assert_array_equal(back[0].ann.points, recs[0].ann.points)
    assert back[1].ann.count() == 0 and back[1].ann.image_height == 16


@pytest.mark.parametrize(
    "bad,fragment",
    [
        ("{not json", "invalid JSON"),
        ('{"points": [], "width": 8, "height": 8}', "'image'"),
        ('{"image": "a.png", "points": [[1]], "width": 8, "height": 8}', "point 0"),
        ('{"image": "a.png", "points": [[1, 2]]}', "width"),
        ('{"image": "a.png", "points": [[9, 2]], "width": 8, "height": 8}', "outside"),
    ],
)
def test_loader_reports_line_numbers(tmp_path, bad, fragment):
    good = '{"image": "ok.png", "points": [[1, 2]], "width": 8, "height": 8}'
    path = tmp_path / "ann.jsonl"
    path.write_text(good + "\n\n" + bad + "\n")
    with pytest.raises(AnnotationFormatError) as exc:
        load_annotations(path)
    assert ":3:" in str(exc.value)
    assert fragment in str(exc.value)


def test_loader_uses_size_table(tmp_path):
    path = tmp_path / "ann.jsonl"
    path.write_text('{"image": "a.png", "points": [[1, 2]]}\n')
    recs = load_annotations(path, sizes={"a.png": (16, 16)})
    assert recs[0].ann.image_width == 16
