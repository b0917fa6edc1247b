"""Crop augmentation: map extraction, normalization, masking, bounding
boxes, bilinear resampling, flips."""

import numpy as np
import pytest

from davt.augment import (AttentionMap, BBox, CropMask, binarize,
                          build_crop_plan, crop_resize, extract_attention_map,
                          horizontal_flip, min_bbox, normalize, resize_image)
from davt.backbone import AttentionStack, ViTConfig
from davt.errors import ConfigError, ShapeError
from davt.has import davt_forward


def bbox_oracle(mask):
    """Exhaustive scan over every pixel, tracking extrema."""
    h, w = mask.shape
    rmin = cmin = None
    rmax = cmax = -1
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                if rmin is None:
                    rmin = i
                rmax = i
                cmin = j if cmin is None else min(cmin, j)
                cmax = max(cmax, j)
    if rmin is None:
        return BBox(0, h - 1, 0, w - 1)
    return BBox(rmin, rmax, cmin, cmax)


def one_hot_stack(config, patch_index):
    t = config.num_tokens
    weights = np.zeros((config.layers - 1, config.heads, t, t))
    weights[:, :, :, patch_index + 1] = 1.0  # every row points at that patch
    return AttentionStack(weights)


class TestExtractAttentionMap:
    def test_uniform_attention_gives_constant_map(self, tiny_config):
        t = tiny_config.num_tokens
        weights = np.full((tiny_config.layers - 1, tiny_config.heads, t, t),
                          1.0 / t)
        amap = extract_attention_map(AttentionStack(weights), 1, tiny_config)
        assert np.allclose(amap.grid, 1.0 / t)
        assert np.allclose(amap.upsampled, 1.0 / t)

    def test_one_hot_row_peaks_inside_that_patch_cell(self, tiny_config):
        g, p = tiny_config.grid_size, tiny_config.patch_size
        for patch in (0, 5, tiny_config.num_patches - 1):
            amap = extract_attention_map(one_hot_stack(tiny_config, patch),
                                         2, tiny_config)
            peak = np.unravel_index(np.argmax(amap.upsampled),
                                    amap.upsampled.shape)
            assert peak[0] // p == patch // g
            assert peak[1] // p == patch % g

    def test_layer_out_of_range(self, tiny_config):
        stack = one_hot_stack(tiny_config, 0)
        with pytest.raises(ConfigError):
            extract_attention_map(stack, 0, tiny_config)
        with pytest.raises(ConfigError):
            extract_attention_map(stack, tiny_config.layers, tiny_config)

    def test_head_max_aggregation(self, tiny_config):
        t = tiny_config.num_tokens
        weights = np.zeros((tiny_config.layers - 1, tiny_config.heads, t, t))
        weights[0, 0, 0, 1] = 1.0
        weights[0, 1, 0, 2] = 1.0
        mean_map = extract_attention_map(AttentionStack(weights), 1,
                                         tiny_config, head_agg="mean")
        max_map = extract_attention_map(AttentionStack(weights), 1,
                                        tiny_config, head_agg="max")
        assert mean_map.grid.max() == pytest.approx(1.0 / tiny_config.heads)
        assert max_map.grid.max() == 1.0


class TestNormalize:
    def test_midpoint_arithmetic(self):
        out, degenerate = normalize(np.array([[0.1, 0.3, 0.5]]))
        assert not degenerate
        assert out[0, 1] == pytest.approx(0.5)

    def test_endpoints_attained(self, rng):
        raw = rng.uniform(-3, 5, (6, 7))
        out, _ = normalize(raw)
        assert out.min() == 0.0
        assert out.max() == 1.0
        assert ((out >= 0) & (out <= 1)).all()

    def test_constant_map_flagged(self):
        out, degenerate = normalize(np.full((4, 4), 0.7))
        assert degenerate
        assert np.array_equal(out, np.zeros((4, 4)))


class TestBinarize:
    def test_strictly_greater(self):
        mask = binarize(np.array([[0.6, 0.5, 0.4]]), 0.5)
        assert mask.mask.tolist() == [[1, 0, 0]]

    def test_threshold_interval_enforced(self):
        field = np.zeros((2, 2))
        with pytest.raises(ConfigError):
            binarize(field, 0.39)
        with pytest.raises(ConfigError):
            binarize(field, 0.61)
        binarize(field, 0.4)
        binarize(field, 0.6)

    def test_non_constant_map_always_marks_a_pixel(self, rng):
        for _ in range(100):
            out, degenerate = normalize(rng.uniform(0, 1, (5, 5)))
            assert not degenerate
            assert binarize(out, 0.6).mask.sum() >= 1

    def test_affine_rescaling_leaves_mask_unchanged(self, rng):
        raw = rng.uniform(0, 1, (8, 8))
        base = binarize(normalize(raw)[0], 0.5).mask
        for scale, shift in [(3.5, 0.0), (0.25, -2.0), (17.0, 400.0)]:
            rescaled = binarize(normalize(scale * raw + shift)[0], 0.5).mask
            assert np.array_equal(base, rescaled)


class TestMinBbox:
    def test_two_marked_pixels(self):
        mask = np.zeros((8, 10), dtype=np.uint8)
        mask[2, 3] = 1
        mask[5, 7] = 1
        box = min_bbox(CropMask(mask, 0.5))
        assert (box.row_min, box.row_max, box.col_min, box.col_max) == (2, 5, 3, 7)

    def test_all_ones_full_image(self):
        box = min_bbox(CropMask(np.ones((4, 6), dtype=np.uint8), 0.5))
        assert (box.row_min, box.row_max, box.col_min, box.col_max) == (0, 3, 0, 5)

    def test_empty_mask_falls_back_to_full_image(self):
        box = min_bbox(CropMask(np.zeros((4, 6), dtype=np.uint8), 0.5))
        assert (box.row_min, box.row_max, box.col_min, box.col_max) == (0, 3, 0, 5)

    def test_thousand_random_masks_match_oracle(self, rng):
        for _ in range(1000):
            h = int(rng.integers(1, 12))
            w = int(rng.integers(1, 12))
            density = rng.uniform(0, 0.4)
            mask = (rng.uniform(size=(h, w)) < density).astype(np.uint8)
            got = min_bbox(CropMask(mask, 0.5))
            assert got == bbox_oracle(mask)


class TestCropResize:
    def test_full_box_is_bit_exact_identity(self, rng):
        image = rng.uniform(0, 1, (16, 16, 3))
        out = crop_resize(image, BBox(0, 15, 0, 15))
        assert np.array_equal(out, image)

    def test_checkerboard_hand_values(self):
        board = np.zeros((2, 2, 3))
        board[0, 0] = board[1, 1] = 1.0
        out = resize_image(board, 4, 4)
        expected_row0 = [1.0, 2 / 3, 1 / 3, 0.0]
        np.testing.assert_allclose(out[0, :, 0], expected_row0, atol=1e-12)
        expected_row1 = [2 / 3, 5 / 9, 4 / 9, 1 / 3]
        np.testing.assert_allclose(out[1, :, 0], expected_row1, atol=1e-12)
        np.testing.assert_allclose(out[3, :, 0], expected_row0[::-1],
                                   atol=1e-12)
        # Cell-boundary midpoint interpolates to one half exactly.
        mid = resize_image(board, 3, 3)
        assert mid[1, 1, 0] == pytest.approx(0.5, abs=1e-15)

    def test_constant_region_stays_constant(self):
        image = np.full((12, 12, 3), 0.37)
        out = crop_resize(image, BBox(2, 5, 3, 9))
        assert np.allclose(out, 0.37)

    def test_box_must_fit_image(self, rng):
        image = rng.uniform(0, 1, (8, 8, 3))
        with pytest.raises(ShapeError):
            crop_resize(image, BBox(0, 8, 0, 7))

    def test_magnified_content_downsamples_back(self, rng):
        # Aligned sizes: (box height - 1) divides (H - 1), so the downsample
        # grid hits the upsample knots exactly.
        image = rng.uniform(0, 1, (64, 64, 3))
        box = BBox(5, 12, 10, 31)  # 8 x 22; 7 | 63 and 21 | 63
        out = crop_resize(image, box)
        region = image[5:13, 10:32]
        back = resize_image(out, 8, 22)
        assert np.abs(back - region).max() < 1e-6

    def test_area_never_exceeds_image(self, rng):
        for _ in range(100):
            mask = (rng.uniform(size=(10, 10)) < 0.2).astype(np.uint8)
            box = min_bbox(CropMask(mask, 0.5))
            assert box.height * box.width <= 100


class TestHorizontalFlip:
    def test_involution(self, rng):
        image = rng.uniform(0, 1, (6, 9, 3))
        assert np.array_equal(horizontal_flip(horizontal_flip(image, 0.0), 0.0),
                              image)

    def test_column_mapping(self, rng):
        image = rng.uniform(0, 1, (4, 7, 3))
        flipped = horizontal_flip(image, 0.2)
        for j in range(7):
            assert np.array_equal(flipped[:, j], image[:, 6 - j])

    def test_coin_above_half_is_identity(self, rng):
        image = rng.uniform(0, 1, (4, 4, 3))
        assert np.array_equal(horizontal_flip(image, 0.5), image)
        assert np.array_equal(horizontal_flip(image, 0.9), image)

    def test_seeded_sequence_reproducible(self):
        coins_a = np.random.default_rng(77).random(16)
        coins_b = np.random.default_rng(77).random(16)
        image = np.random.default_rng(1).uniform(0, 1, (4, 4, 3))
        flips_a = [horizontal_flip(image, c).tobytes() for c in coins_a]
        flips_b = [horizontal_flip(image, c).tobytes() for c in coins_b]
        assert flips_a == flips_b


class TestBuildCropPlan:
    def test_plan_from_live_model(self, tiny_config, tiny_params, rng):
        image = rng.uniform(0, 1, (32, 32, 3))
        out = davt_forward(image, tiny_params, tiny_config)
        plan = build_crop_plan(image, out.attention, 2, 0.5, tiny_config)
        assert plan.image.shape == image.shape
        assert not plan.degenerate
        assert plan.mask.mask.any()
        assert plan.attention_map.source_layer == 2

    def test_degenerate_map_becomes_no_crop(self, tiny_config, rng):
        t = tiny_config.num_tokens
        weights = np.full((tiny_config.layers - 1, tiny_config.heads, t, t),
                          1.0 / t)
        image = rng.uniform(0, 1, (32, 32, 3))
        plan = build_crop_plan(image, AttentionStack(weights), 1, 0.5,
                               tiny_config)
        assert plan.degenerate
        assert plan.box == BBox(0, 31, 0, 31)
        assert np.array_equal(plan.image, image)
