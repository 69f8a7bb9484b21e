import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chsnet.densitymap import PointAnnotations
from chsnet.noise import NoiseSpec, corrupt, inject_missing, inject_shift, shift_offsets


def make_ann(rng, n, size=128):
    return PointAnnotations(rng.uniform(0, size - 1, size=(n, 2)), size, size)


def test_missing_rate_zero_is_identity(rng):
    ann = make_ann(rng, 30)
    out, removed = inject_missing(ann, 0.0, 1)
    np.testing.assert_array_equal(out.points, ann.points)
    assert removed == []


def test_missing_rate_one_removes_everything(rng):
    ann = make_ann(rng, 30)
    out, removed = inject_missing(ann, 1.0, 1)
    assert out.count() == 0
    assert removed == list(range(30))


def test_missing_half_of_hundred(rng):
    out, removed = inject_missing(make_ann(rng, 100), 0.5, 7)
    assert out.count() == 50
    assert len(set(removed)) == 50


def test_missing_keeps_survivor_order(rng):
    ann = make_ann(rng, 20)
    out, removed = inject_missing(ann, 0.3, 3)
    keep = [i for i in range(20) if i not in removed]
    np.testing.assert_array_equal(out.points, ann.points[keep])


@pytest.mark.parametrize("rate", [-0.01, 1.5])
def test_missing_rejects_bad_rate(rng, rate):
    with pytest.raises(ValueError):
        inject_missing(make_ann(rng, 3), rate, 0)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(0, 200), rate=st.floats(0, 1), seed=st.integers(0, 2**31))
def test_missing_exact_count(n, rate, seed):
    ann = make_ann(np.random.default_rng(seed), n)
    out, removed = inject_missing(ann, rate, seed)
    assert len(removed) == math.floor(rate * n)
    assert out.count() == n - math.floor(rate * n)


def test_shift_zero_sigma_is_identity(rng):
    ann = make_ann(rng, 25)
    np.testing.assert_array_equal(inject_shift(ann, 0.0, 5).points, ann.points)


def test_shift_rejects_negative_sigma(rng):
    with pytest.raises(ValueError):
        inject_shift(make_ann(rng, 3), -1.0, 0)


def test_shift_std_matches_sigma():
    # interior points far from the borders so clamping never triggers
    rng = np.random.default_rng(0)
    ann = PointAnnotations(rng.uniform(100, 412, size=(1000, 2)), 512, 512)
    out = inject_shift(ann, 8.0, 42)
    d = out.points - ann.points
    assert out.count() == 1000
    for axis in (0, 1):
        assert abs(d[:, axis].std() - 8.0) <= 0.8


@settings(max_examples=40, deadline=None)
@given(n=st.integers(0, 60), sigma=st.floats(0, 50), seed=st.integers(0, 2**31))
def test_shift_stays_in_bounds_and_keeps_count(n, sigma, seed):
    ann = make_ann(np.random.default_rng(seed), n, 64)
    out = inject_shift(ann, sigma, seed)
    assert out.count() == n
    assert np.all(out.points >= 0) and np.all(out.points[:, 0] < 64) and np.all(out.points[:, 1] < 64)


def test_determinism(rng):
    ann = make_ann(rng, 50)
    spec = NoiseSpec(0.2, 3.0, 11)
    a, ma = corrupt(ann, spec, 4)
    b, mb = corrupt(ann, spec, 4)
    assert a.points.tobytes() == b.points.tobytes()
    assert ma == mb
    c, _ = corrupt(ann, spec, 5)
    assert c.points.tobytes() != a.points.tobytes()


def test_manifest_describes_corruption(rng):
    ann = make_ann(rng, 40)
    out, manifest = corrupt(ann, NoiseSpec(0.25, 2.0, 1), 0)
    assert len(manifest["removed_indices"]) == 10
    keep = [i for i in range(40) if i not in manifest["removed_indices"]]
    np.testing.assert_allclose(ann.points[keep] + np.array(manifest["applied_shifts"]), out.points, atol=1e-12)


def test_shift_offsets_stream_is_seeded():
    a = shift_offsets(5, 2.0, [1, 2])
    b = shift_offsets(5, 2.0, [1, 2])
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kw", [dict(missing_rate=1.2), dict(shift_sigma=-1)])
def test_noise_spec_validation(kw):
    with pytest.raises(ValueError):
        NoiseSpec(**kw)


def test_missing_rate_with_inexact_float():
    ann = PointAnnotations(np.full((100, 2), 5.0), 20, 20)
    kept, removed = inject_missing(ann, 0.29, seed=0)
    assert len(removed) == 29 and kept.count() == 71
