import numpy as np
import pytest

from crossview.augment import (
    AugmentConfig,
    augment_batch,
    augment_pair,
    augment_pair_batch,
    crop,
    crop_batch,
    shear,
    shear_batch,
    shear_matrix,
)
from crossview.data import SkeletonSequence


def _seq(rng, frames=50, joints=8):
    return rng.normal(size=(3, frames, joints))


class TestShear:
    def test_zero_amplitude_is_identity(self):
        rng = np.random.default_rng(0)
        x = _seq(rng)
        out = shear(x, 0.0, np.random.default_rng(1))
        np.testing.assert_array_equal(out, x)

    def test_hand_matrix_vector_product(self):
        factors = np.zeros(6)
        factors[2] = 0.3  # a21
        factors[4] = 0.2  # a31
        mat = shear_matrix(factors)[0]
        np.testing.assert_allclose(mat @ np.array([1.0, 0.0, 0.0]),
                                   [1.0, 0.3, 0.2], rtol=0, atol=0)

    def test_origin_is_fixed(self):
        x = np.zeros((3, 5, 4))
        out = shear(x, 1.0, np.random.default_rng(2))
        np.testing.assert_array_equal(out, x)

    def test_one_matrix_per_sample(self):
        # all frames and joints of a sample transform consistently
        rng = np.random.default_rng(3)
        x = np.zeros((3, 4, 2))
        x[:, :, :] = np.array([1.0, 2.0, -1.0])[:, None, None]
        out = shear(x, 0.5, rng)
        for t in range(4):
            for v in range(2):
                np.testing.assert_array_equal(out[:, t, v], out[:, 0, 0])

    def test_shape_preserved(self):
        rng = np.random.default_rng(4)
        x = _seq(rng)
        assert shear(x, 0.5, rng).shape == x.shape

    def test_negative_amplitude_rejected(self):
        with pytest.raises(ValueError, match="amplitude"):
            shear(np.zeros((3, 4, 2)), -0.1, np.random.default_rng(0))


class TestCrop:
    def test_zero_gamma_is_identity(self):
        rng = np.random.default_rng(5)
        x = _seq(rng)
        np.testing.assert_array_equal(crop(x, 0, np.random.default_rng(0)), x)

    def test_padding_arithmetic_t50_gamma6(self):
        # pad = floor(50/6) = 8, padded length 66, window start in [0, 16]
        x = np.arange(50.0)[None, :, None] * np.ones((3, 1, 2))
        starts = set()
        for s in range(1000):
            out = crop(x, 6, np.random.default_rng(s))
            assert out.shape == (3, 50, 2)
            first = out[0, 0, 0]
            padded_head = np.concatenate([np.arange(8, 0, -1.0), np.arange(50.0)])
            matches = np.nonzero(padded_head == first)[0]
            starts.update(matches.tolist())
        assert min(starts) >= 0 and max(starts) <= 16

    def test_constant_sequence_unchanged(self):
        x = np.full((3, 20, 4), 1.5)
        out = crop(x, 4, np.random.default_rng(9))
        np.testing.assert_array_equal(out, x)

    def test_reflection_layout(self):
        # T=4, gamma=2 -> pad 2: padded frames are [f2 f1 | f0 f1 f2 f3 | f2 f1]
        x = np.arange(4.0)[None, :, None] * np.ones((3, 1, 2))
        seen = set()
        for s in range(200):
            out = crop(x, 2, np.random.default_rng(s))
            seen.add(tuple(out[0, :, 0].tolist()))
        expected_padded = [2.0, 1.0, 0.0, 1.0, 2.0, 3.0, 2.0, 1.0]
        expected = {tuple(expected_padded[i:i + 4]) for i in range(5)}
        assert seen == expected

    def test_oversized_pad_rejected(self):
        x = np.zeros((3, 4, 2))
        with pytest.raises(ValueError, match="reflection"):
            crop(x, 1, np.random.default_rng(0))


class TestAugmentPair:
    def test_identity_config_returns_source(self):
        rng = np.random.default_rng(11)
        x = _seq(rng)
        cfg = AugmentConfig(shear_beta=0.0, crop_gamma=0)
        a, b = augment_pair(x, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(a, x)
        np.testing.assert_array_equal(b, x)

    def test_same_seed_for_both_draws_matches(self):
        rng = np.random.default_rng(12)
        x = _seq(rng)
        cfg = AugmentConfig(shear_beta=0.5, crop_gamma=6)
        a, b = augment_pair(x, cfg, np.random.default_rng(7),
                            rng_second=np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_independent_draws_differ(self):
        rng = np.random.default_rng(13)
        x = _seq(rng)
        cfg = AugmentConfig(shear_beta=0.5, crop_gamma=6)
        a, b = augment_pair(x, cfg, np.random.default_rng(21))
        assert not np.array_equal(a, b)

    def test_sequence_wrapper_round_trips(self):
        rng = np.random.default_rng(14)
        seq = SkeletonSequence(_seq(rng), label=3)
        cfg = AugmentConfig()
        a, b = augment_pair(seq, cfg, np.random.default_rng(0))
        assert isinstance(a, SkeletonSequence) and a.label == 3
        assert a.data.shape == seq.data.shape

    def test_config_validation(self):
        with pytest.raises(ValueError, match="amplitude"):
            AugmentConfig(shear_beta=-1.0)
        with pytest.raises(ValueError, match="ratio"):
            AugmentConfig(crop_gamma=-2)


class TestBatchedVariants:
    def test_shear_batch_uses_per_sample_matrices(self):
        rng = np.random.default_rng(15)
        batch = rng.normal(size=(4, 3, 10, 8))
        out = shear_batch(batch, 0.5, np.random.default_rng(1))
        assert out.shape == batch.shape
        # distinct samples get distinct transforms with probability 1
        ratio0 = out[0] / batch[0]
        ratio1 = out[1] / batch[1]
        assert not np.allclose(ratio0, ratio1)

    def test_crop_batch_matches_single_windows(self):
        rng = np.random.default_rng(16)
        batch = rng.normal(size=(3, 3, 20, 4))
        out = crop_batch(batch, 4, np.random.default_rng(2))
        pad = 5
        padded = np.pad(batch, [(0, 0), (0, 0), (pad, pad), (0, 0)], mode="reflect")
        for i in range(3):
            hits = [s for s in range(2 * pad + 1)
                    if np.array_equal(padded[i, :, s:s + 20, :], out[i])]
            assert hits, f"sample {i}: window not found in padded construction"

    def test_pair_batch_shapes_and_divergence(self):
        rng = np.random.default_rng(17)
        batch = rng.normal(size=(5, 3, 30, 8))
        a, b = augment_pair_batch(batch, AugmentConfig(), np.random.default_rng(3))
        assert a.shape == batch.shape and b.shape == batch.shape
        assert not np.array_equal(a, b)

    def test_batch_deterministic_given_seed(self):
        rng = np.random.default_rng(18)
        batch = rng.normal(size=(4, 3, 20, 8))
        one = augment_batch(batch, AugmentConfig(), np.random.default_rng(42))
        two = augment_batch(batch, AugmentConfig(), np.random.default_rng(42))
        assert one.tobytes() == two.tobytes()
