"""Mask sampling and sequence partitioning."""

import numpy as np
import pytest

from cre.errors import ContractError
from cre.masking import MaskVector, apply_mask, sample_mask


class TestSampleMask:
    def test_count_at_l256_r055(self):
        assert sample_mask(256, 0.55, rng_seed=0).count == 140

    def test_count_at_l64_r055(self):
        assert sample_mask(64, 0.55, rng_seed=0).count == 35

    def test_zero_masked_count_rejected(self):
        with pytest.raises(ContractError):
            sample_mask(10, 0.05, rng_seed=0)  # floor(0.5) == 0

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.5])
    def test_ratio_bounds(self, bad):
        with pytest.raises(ContractError):
            sample_mask(16, bad, rng_seed=0)

    def test_degenerate_length_rejected(self):
        with pytest.raises(ContractError):
            sample_mask(1, 0.5, rng_seed=0)

    def test_same_seed_same_mask(self):
        a = sample_mask(64, 0.55, rng_seed=123)
        b = sample_mask(64, 0.55, rng_seed=123)
        assert (a.flags == b.flags).all()

    def test_different_seeds_generally_differ(self):
        masks = {sample_mask(64, 0.55, rng_seed=s).flags.tobytes() for s in range(20)}
        assert len(masks) > 1

    def test_uniform_frequency_over_10000_seeds(self):
        length, ratio = 64, 0.55
        counts = np.zeros(length)
        for seed in range(10_000):
            counts += sample_mask(length, ratio, rng_seed=seed).flags
        freq = counts / 10_000
        assert np.abs(freq - ratio).max() < 0.05


class TestApplyMask:
    def test_single_masked_position(self):
        mask = MaskVector(flags=np.eye(8, dtype=bool)[3])
        parts = apply_mask(np.arange(8), mask)
        assert parts.visible_ids.shape == (7,)
        assert parts.masked_positions.tolist() == [3]

    def test_visible_count_l64(self):
        mask = sample_mask(64, 0.55, rng_seed=5)
        parts = apply_mask(np.arange(64), mask)
        assert parts.visible_ids.shape == (29,)
        assert parts.masked_positions.shape == (35,)

    def test_partition_property(self):
        tokens = np.random.default_rng(0).integers(0, 10, size=64)
        mask = sample_mask(64, 0.55, rng_seed=9)
        parts = apply_mask(tokens, mask)
        merged = np.concatenate([parts.visible_positions, parts.masked_positions])
        assert sorted(merged.tolist()) == list(range(64))
        np.testing.assert_array_equal(tokens[parts.visible_positions], parts.visible_ids)

    def test_original_sequence_untouched(self):
        tokens = np.arange(16)
        before = tokens.copy()
        apply_mask(tokens, sample_mask(16, 0.5, rng_seed=1))
        np.testing.assert_array_equal(tokens, before)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            apply_mask(np.arange(10), sample_mask(16, 0.5, rng_seed=2))
