import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpgflow.errors import ContractViolation, FallbackToRandomMask
from lpgflow.lpg import (MatchSet, crop_pixel_set, crop_right, masked_latent, matching_mask,
                         random_polygon_mask, rasterize_polygon, stitch)


def grid_matches(size=32, conf=0.9, seed=0):
    ys, xs = np.mgrid[0:size, 0:size]
    pts = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    rng = np.random.default_rng(seed)
    c = np.full(len(pts), conf) if np.isscalar(conf) else conf
    return MatchSet(left=pts + rng.normal(0, 0.1, pts.shape), right=pts, confidence=c)


def test_rasterize_axis_aligned_square():
    m = rasterize_polygon([(2, 1), (6, 1), (6, 4), (2, 4)], 8, 8)
    expected = np.zeros((8, 8), dtype=bool)
    expected[1:4, 2:6] = True
    np.testing.assert_array_equal(m, expected)


def test_rasterize_triangle_area_converges():
    tri = np.array([(0, 0), (64, 0), (0, 64)])
    assert rasterize_polygon(tri, 64, 64).sum() == pytest.approx(64 * 64 / 2, rel=0.02)


def test_degenerate_polygon_is_empty():
    assert not rasterize_polygon([(0, 0), (3, 3)], 4, 4).any()


def test_stitch_full_mask(rng):
    ref, tgt = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3))
    s = stitch(ref, tgt, "full")
    assert s.canvas.shape == (8, 16, 3) and s.mask.shape == (8, 16, 1)
    np.testing.assert_array_equal(s.mask[:, :8], 0)
    np.testing.assert_array_equal(s.mask[:, 8:], 1)
    np.testing.assert_allclose(s.masked[:, :8], ref, atol=1e-7)
    np.testing.assert_array_equal(s.masked[:, 8:], 0)
    np.testing.assert_allclose(crop_right(s.canvas), tgt, atol=1e-7)


def test_stitch_polygon_and_precomputed_masks(rng):
    ref, tgt = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3))
    s = stitch(ref, tgt, np.array([(0, 0), (4, 0), (4, 4), (0, 4)]))
    assert s.mask.sum() == 16 and s.mask[:4, 8:12].all()
    assert stitch(ref, tgt, np.zeros((0, 2))).mask.sum() == 0
    assert stitch(ref, tgt, "none").mask.sum() == 0
    left_masked = np.zeros((8, 16, 1))
    left_masked[0, 0] = 1
    with pytest.raises(ContractViolation):
        stitch(ref, tgt, left_masked)


def test_stitch_validation(rng):
    good = rng.uniform(0, 1, (8, 8, 3))
    with pytest.raises(ContractViolation):
        stitch(good, rng.uniform(0, 1, (8, 4, 3)))
    with pytest.raises(ContractViolation):
        stitch(good, good + 2.0)
    with pytest.raises(ContractViolation):
        stitch(good, good, "half")


def test_masked_latent_requires_binary_mask():
    with pytest.raises(ContractViolation):
        masked_latent(np.ones((2, 2, 3)), np.full((2, 2, 1), 0.5))


@given(st.integers(0, 10_000))
def test_random_masks_stay_on_right_half(seed):
    m = random_polygon_mask(16, 16, np.random.default_rng(seed))
    assert m.shape == (16, 32, 1)
    assert not m[:, :16].any()
    assert 0.10 <= m[:, 16:].mean() <= 0.60


@given(st.integers(0, 10_000))
def test_matching_mask_geometry(seed):
    rng = np.random.default_rng(seed)
    mm = matching_mask(grid_matches(), 32, 32, rng)
    assert 15 <= len(mm.vertices) <= 30
    assert 0.2 <= mm.crop_fraction <= 0.5
    x0, y0, x1, y1 = mm.crop
    v = mm.vertices
    assert np.all((v[:, 0] >= x0) & (v[:, 0] <= x1) & (v[:, 1] >= y0) & (v[:, 1] <= y1))
    target = mm.mask[:, 32:, 0] > 0
    assert not (target & ~crop_pixel_set(mm.crop, 32, 32)).any()
    assert not mm.mask[:, :32].any()


def test_matching_mask_vertices_are_angle_sorted(rng):
    mm = matching_mask(grid_matches(), 32, 32, rng)
    c = mm.vertices.mean(axis=0)
    ang = np.arctan2(mm.vertices[:, 1] - c[1], mm.vertices[:, 0] - c[0])
    assert np.all(np.diff(ang) >= 0)


def test_confidence_threshold_is_inclusive(rng):
    mm = matching_mask(grid_matches(conf=0.8), 32, 32, rng)
    assert len(mm.vertices) >= 15


def test_low_confidence_falls_back(rng):
    with pytest.raises(FallbackToRandomMask):
        matching_mask(grid_matches(conf=0.79), 32, 32, rng)


def test_only_confident_points_become_vertices(rng):
    conf = np.where(np.arange(32 * 32) % 2 == 0, 0.95, 0.1)
    matches = grid_matches(conf=conf)
    keep = {tuple(p) for p in matches.right[conf >= 0.8]}
    mm = matching_mask(matches, 32, 32, rng)
    assert all(tuple(v) in keep for v in mm.vertices)
