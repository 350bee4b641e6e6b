"""Patch pipeline: gridding, pad-crop augmentation, mask plans, batches."""

import numpy as np
import numpy.testing as npt
import pytest
from scipy import stats

from selfie.errors import ConfigError
from selfie.patches import (augment_pad_crop, build_pretrain_batch,
                            extract_patch_grid, image_to_grid, mask_counts,
                            reassemble, sample_mask_plan)
from selfie.rng import RngStream


def image(h, w, c=3, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (h, w, c)).astype(np.float32)


class TestExtractPatchGrid:
    def test_cifar_geometry(self):
        ps = extract_patch_grid(image(32, 32), 8)
        assert len(ps.patches) == 16
        assert ps.grid_shape == (4, 4)

    def test_imagenet_geometry(self):
        ps = extract_patch_grid(image(224, 224), 32)
        assert len(ps.patches) == 49
        assert ps.grid_shape == (7, 7)

    def test_degenerate_single_patch(self):
        ps = extract_patch_grid(image(8, 8), 8)
        assert len(ps.patches) == 1
        assert ps.locations == [(0, 0)]

    def test_non_divisible_rejected(self):
        with pytest.raises(ConfigError):
            extract_patch_grid(image(32, 32), 5)

    def test_patch_content_and_order(self):
        img = image(16, 8, seed=1)
        ps = extract_patch_grid(img, 8)
        assert ps.locations == [(0, 0), (1, 0)]
        npt.assert_array_equal(ps.patches[1], img[8:16, 0:8])

    def test_locations_cover_grid(self):
        ps = extract_patch_grid(image(24, 16), 8)
        assert sorted(ps.locations) == [(r, c) for r in range(3) for c in range(2)]


class _FixedOffsets:
    """Stand-in rng whose integer draws are pinned."""

    def __init__(self, *values):
        self.values = list(values)

    def integers(self, low, high, size):
        return np.array(self.values[:size])


class TestAugmentPadCrop:
    def test_pad_zero_identity(self):
        img = image(8, 8)
        assert augment_pad_crop(img, 0, np.random.default_rng(0)) is img

    def test_shape_preserved(self):
        out = augment_pad_crop(image(32, 32), 4, np.random.default_rng(1))
        assert out.shape == (32, 32, 3)

    def test_corner_crop_zeroes_first_row_and_col(self):
        img = np.ones((4, 4, 1), dtype=np.float32)
        out = augment_pad_crop(img, 1, _FixedOffsets(0, 0))
        npt.assert_array_equal(out[0, :, 0], 0.0)
        npt.assert_array_equal(out[:, 0, 0], 0.0)
        npt.assert_array_equal(out[1:, 1:, 0], 1.0)

    def test_center_crop_recovers_image(self):
        img = image(6, 6, seed=2)
        out = augment_pad_crop(img, 2, _FixedOffsets(2, 2))
        npt.assert_array_equal(out, img)

    def test_output_always_window_of_padded(self):
        img = image(8, 8, seed=3)
        padded = np.pad(img, ((4, 4), (4, 4), (0, 0)))
        for seed in range(20):
            out = augment_pad_crop(img, 4, np.random.default_rng(seed))
            found = any(
                np.array_equal(out, padded[r:r + 8, c:c + 8])
                for r in range(9) for c in range(9))
            assert found

    def test_negative_pad_rejected(self):
        with pytest.raises(ConfigError):
            augment_pad_crop(image(4, 4), -1, np.random.default_rng(0))


class TestSampleMaskPlan:
    def test_counts_16_patches_075(self):
        plan = sample_mask_plan((4, 4), 0.75, np.random.default_rng(0))
        assert len(plan.encoder_locs) == 12
        assert len(plan.decoder_locs) == 4

    def test_partition_disjoint_exhaustive(self):
        plan = sample_mask_plan((3, 3), 0.6, np.random.default_rng(1))
        both = set(plan.encoder_locs) | set(plan.decoder_locs)
        assert not set(plan.encoder_locs) & set(plan.decoder_locs)
        assert both == {(r, c) for r in range(3) for c in range(3)}

    def test_too_few_decoder_patches(self):
        with pytest.raises(ConfigError, match="smaller p"):
            sample_mask_plan((2, 2), 0.9, np.random.default_rng(0))

    def test_invalid_p(self):
        with pytest.raises(ConfigError):
            mask_counts((4, 4), 1.5)

    def test_mask_marginals_uniform(self):
        # each location should be masked p=0.5 of the time over 10^4 draws
        gen = np.random.default_rng(7)
        counts = np.zeros(16)
        draws = 10_000
        for _ in range(draws):
            plan = sample_mask_plan((4, 4), 0.5, gen)
            for r, c in plan.decoder_locs:
                counts[4 * r + c] += 1
        freqs = counts / draws
        assert np.all(np.abs(freqs - 0.5) < 0.02)
        # chi-squared uniformity over which locations get masked
        _, pvalue = stats.chisquare(counts)
        assert pvalue > 0.01

    def test_decoder_order_randomized(self):
        gen = np.random.default_rng(9)
        orders = {tuple(sample_mask_plan((4, 4), 0.5, gen).decoder_locs)
                  for _ in range(50)}
        assert len(orders) > 10


class TestBuildPretrainBatch:
    def test_shapes_cifar_style(self):
        batch = build_pretrain_batch([image(32, 32)], 8, 0.75,
                                     RngStream.from_seed(0))
        assert batch.encoder_patches.shape == (1, 12, 8, 8, 3)
        assert batch.decoder_patches.shape == (1, 4, 8, 8, 3)
        assert batch.encoder_locations.shape == (1, 12, 2)
        assert batch.grid_shape == (4, 4)

    def test_partition_per_image(self):
        imgs = [image(16, 16, seed=s) for s in range(5)]
        batch = build_pretrain_batch(imgs, 4, 0.75, RngStream.from_seed(1))
        for b in range(5):
            enc = {tuple(loc) for loc in batch.encoder_locations[b]}
            dec = {tuple(loc) for loc in batch.decoder_locations[b]}
            assert not enc & dec
            assert enc | dec == {(r, c) for r in range(4) for c in range(4)}

    def test_round_trip_bit_exact(self):
        imgs = [image(16, 16, seed=s) for s in range(3)]
        batch = build_pretrain_batch(imgs, 4, 0.5, RngStream.from_seed(2), pad=2)
        npt.assert_array_equal(reassemble(batch, 4), batch.images)

    def test_no_augment_keeps_input_images(self):
        imgs = [image(16, 16, seed=4)]
        batch = build_pretrain_batch(imgs, 4, 0.75, RngStream.from_seed(3), pad=0)
        npt.assert_array_equal(batch.images[0], imgs[0])

    def test_deterministic_per_stream(self):
        imgs = [image(16, 16, seed=s) for s in range(4)]
        a = build_pretrain_batch(imgs, 4, 0.75, RngStream.from_seed(5), pad=2)
        b = build_pretrain_batch(imgs, 4, 0.75, RngStream.from_seed(5), pad=2)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.decoder_locations.tobytes() == b.decoder_locations.tobytes()

    def test_empty_batch_rejected(self):
        with pytest.raises(ConfigError):
            build_pretrain_batch([], 4, 0.75, RngStream.from_seed(0))

    def test_mixed_shapes_rejected(self):
        with pytest.raises(ConfigError, match="share a shape"):
            build_pretrain_batch([image(16, 16), image(8, 8)], 4, 0.75,
                                 RngStream.from_seed(0))


class TestImageToGrid:
    def test_matches_extract_patch_grid(self):
        img = image(16, 16, seed=6)
        patches, locs = image_to_grid(img[None], 4)
        ps = extract_patch_grid(img, 4)
        assert patches.shape == (1, 16, 4, 4, 3)
        for k in range(16):
            assert tuple(locs[k]) == ps.locations[k]
            npt.assert_array_equal(patches[0, k], ps.patches[k])
