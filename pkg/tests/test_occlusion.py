import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adp_reid.occlusion import (
    apply_occlusion,
    crop_corner_background,
    make_geometry,
    occluder_size,
    patchify_mask,
    pixel_mask,
    random_erase,
    sample_occluder_geometry,
)


def brute_force_cover(mask: np.ndarray, P: int, S: int) -> np.ndarray:
    H, W = mask.shape
    h, w = (H + S - P) // S, (W + S - P) // S
    out = []
    for r in range(h):
        for c in range(w):
            cell = mask[r * S:r * S + P, c * S:c * S + P]
            out.append(cell.sum() / (P * P))
    return np.array(out)


def test_corner_crop_touches_a_corner():
    img = torch.arange(3 * 256 * 128, dtype=torch.float32).reshape(3, 256, 128)
    for seed in range(20):
        patch = crop_corner_background(img, np.random.default_rng(seed))
        assert patch.shape == (3, 64, 32)
        top = int(patch[0, 0, 0]) // 128
        left = int(patch[0, 0, 0]) % 128
        assert top in (0, 256 - 64) and left in (0, 128 - 32)


def test_corner_crop_deterministic_and_size_guard():
    img = torch.rand(3, 64, 32)
    a = crop_corner_background(img, np.random.default_rng(5))
    b = crop_corner_background(img, np.random.default_rng(5))
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        crop_corner_background(torch.rand(3, 4, 4), np.random.default_rng(0))


def test_occluder_size_examples():
    # recomputed independently from s_o = r_o * H * W
    s_o = 0.1 * 256 * 128
    assert s_o == pytest.approx(3276.8)
    assert occluder_size(256, 128, 0.1, 1.0) == (57, 57)
    assert round(math.sqrt(s_o)) == 57
    assert occluder_size(256, 128, 0.5, 3.3) == (233, 70)


def test_sampled_geometry_ranges():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        g = sample_occluder_geometry(256, 128, rng)
        assert 0.1 <= g.area_ratio <= 0.5
        assert 0.3 <= g.aspect <= 3.3
        assert 0.95 * g.target_area <= g.height * g.width <= 1.05 * g.target_area
        assert 0 <= g.top < 256 and 0 <= g.left < 128


def test_sample_geometry_precondition():
    with pytest.raises(ValueError):
        sample_occluder_geometry(8, 64, np.random.default_rng(0))


def test_zero_canvas_equals_plain_paste():
    rng = np.random.default_rng(1)
    img = torch.rand(3, 64, 32)
    patch = crop_corner_background(img, rng)
    geom = sample_occluder_geometry(64, 32, rng)
    plain = apply_occlusion(img, patch, geom, patch_size=8)
    noisy = apply_occlusion(img, patch, geom, torch.zeros_like(img), patch_size=8)
    assert torch.equal(plain.occluded, noisy.occluded)


def test_outside_mask_unchanged_bit_exact():
    rng = np.random.default_rng(2)
    img = torch.rand(3, 64, 32)
    canvas = torch.rand(3, 64, 32) * 2 - 1
    for _ in range(20):
        patch = crop_corner_background(img, rng)
        geom = sample_occluder_geometry(64, 32, rng)
        pair = apply_occlusion(img, patch, geom, canvas, patch_size=8)
        outside = pair.pixel_mask == 0
        assert torch.equal(pair.occluded[:, outside], img[:, outside])
        assert pair.occluded.min() >= 0 and pair.occluded.max() <= 1


def test_single_cell_cover():
    img = torch.rand(3, 64, 64)
    # 16x16 occluder exactly on patch cell (row 1, col 2)
    geom = make_geometry(64, 64, 256 / (64 * 64), 1.0, top=16, left=32)
    assert (geom.height, geom.width) == (16, 16)
    pair = apply_occlusion(img, torch.rand(3, 8, 8), geom, patch_size=16)
    expected = brute_force_cover(pair.pixel_mask.numpy(), 16, 16)
    assert expected[1 * 4 + 2] == 1.0 and expected.sum() == 1.0
    np.testing.assert_array_equal(pair.patch_mask.numpy(), expected)


def test_clipping_and_fully_outside():
    img = torch.rand(3, 64, 32)
    geom = make_geometry(64, 32, 0.4, 1.0, top=60, left=28)
    pair = apply_occlusion(img, torch.rand(3, 8, 8), geom, patch_size=8)
    assert pair.pixel_mask.sum() == 4 * 4
    outside = make_geometry(64, 32, 0.2, 1.0, top=64, left=0)
    with pytest.raises(ValueError):
        apply_occlusion(img, torch.rand(3, 8, 8), outside, patch_size=8)


def test_canvas_shape_checked():
    img = torch.rand(3, 64, 32)
    geom = make_geometry(64, 32, 0.2, 1.0)
    with pytest.raises(ValueError):
        apply_occlusion(img, torch.rand(3, 8, 8), geom, torch.zeros(3, 32, 32))


def test_random_erase_fills_channel_mean():
    img = torch.rand(3, 64, 32)
    geom = make_geometry(64, 32, 0.2, 1.0, top=10, left=5)
    erased, mask = random_erase(img, geom)
    inside = mask.bool()
    means = img.mean(dim=(1, 2))
    for c in range(3):
        assert torch.allclose(erased[c][inside], means[c].expand(int(inside.sum())))
    assert torch.equal(erased[:, ~inside], img[:, ~inside])


boxes = st.tuples(st.integers(0, 63), st.integers(0, 31), st.integers(1, 64), st.integers(1, 32))


@settings(max_examples=60, deadline=None)
@given(box=boxes, P=st.sampled_from([4, 8]), S=st.sampled_from([2, 4, 8]))
def test_patchify_matches_brute_force(box, P, S):
    top, left, h, w = box
    mask = torch.zeros(64, 32)
    mask[top:top + h, left:left + w] = 1.0
    got = patchify_mask(mask, P, S).numpy()
    np.testing.assert_allclose(got, brute_force_cover(mask.numpy(), P, S), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(a=boxes, b=boxes)
def test_patchify_linear_on_disjoint_masks(a, b):
    m1 = torch.zeros(64, 32)
    m1[a[0]:a[0] + a[2], a[1]:a[1] + a[3]] = 1.0
    m2 = torch.zeros(64, 32)
    m2[b[0]:b[0] + b[2], b[1]:b[1] + b[3]] = 1.0
    m2 = m2 * (1 - m1)
    union = torch.clamp(m1 + m2, 0, 1)
    torch.testing.assert_close(patchify_mask(union, 8, 8), patchify_mask(m1, 8, 8) + patchify_mask(m2, 8, 8))
    # partition: with S == P every pixel lies in exactly one cell
    assert float(patchify_mask(union, 8, 8).sum()) * 64 == float(union.sum())


def test_achieved_area_bounded():
    rng = np.random.default_rng(4)
    for _ in range(500):
        g = sample_occluder_geometry(256, 128, rng)
        achieved = float(pixel_mask(g, 256, 128).sum()) / (256 * 128)
        assert achieved <= g.area_ratio * 1.05
