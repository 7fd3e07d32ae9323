"""Encoder/decoder shapes, contracts, and parameter bookkeeping."""

import numpy as np
import pytest

from cre import engine as eg
from cre.engine import Tape, backward
from cre.errors import ContractError
from cre.masking import apply_mask, sample_mask
from cre.model import (ModelConfig, contrastive_feature, encode, fill_and_decode,
                       init_parameters, parameter_count, weight_decay_multiplier)

CFG = ModelConfig(k=16, seq_len=64, embed_dim=32, encoder_depth=2, decoder_depth=1,
                  num_heads=4, mlp_ratio=2.0, contrastive_dim=8)


@pytest.fixture(scope="module")
def params():
    return init_parameters(CFG, seed=0)


def masked_inputs(seed=0, cfg=CFG):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, cfg.k, size=cfg.seq_len)
    mask = sample_mask(cfg.seq_len, 0.55, rng_seed=seed)
    return ids, apply_mask(ids, mask)


class TestModelConfig:
    def test_head_dim_divisibility_enforced(self):
        with pytest.raises(ContractError):
            ModelConfig(k=8, seq_len=16, embed_dim=30, num_heads=4)

    def test_zero_depth_forbidden(self):
        with pytest.raises(ContractError):
            ModelConfig(k=8, seq_len=16, encoder_depth=0)
        with pytest.raises(ContractError):
            ModelConfig(k=8, seq_len=16, decoder_depth=0)

    def test_bad_temperature(self):
        with pytest.raises(ContractError):
            ModelConfig(k=8, seq_len=16, temperature=0.0)


class TestEncode:
    def test_output_shape_29_of_64(self, params):
        _, parts = masked_inputs()
        out = encode(parts.visible_ids, parts.visible_positions, params, CFG)
        assert out.shape == (29, CFG.embed_dim)

    def test_batched_shape(self, params):
        _, p1 = masked_inputs(1)
        _, p2 = masked_inputs(2)
        ids = np.stack([p1.visible_ids, p2.visible_ids])
        pos = np.stack([p1.visible_positions, p2.visible_positions])
        out = encode(ids, pos, params, CFG)
        assert out.shape == (2, 29, CFG.embed_dim)

    def test_mask_token_id_rejected(self, params):
        ids = np.array([0, CFG.k, 2])
        with pytest.raises(ContractError):
            encode(ids, np.array([0, 1, 2]), params, CFG)

    def test_permutation_equivariance(self, params):
        _, parts = masked_inputs(3)
        out = encode(parts.visible_ids, parts.visible_positions, params, CFG)
        perm = np.random.default_rng(4).permutation(len(parts.visible_ids))
        out_p = encode(parts.visible_ids[perm], parts.visible_positions[perm], params, CFG)
        np.testing.assert_allclose(out_p.data, out.data[perm], atol=1e-5)

    def test_deterministic(self, params):
        _, parts = masked_inputs(5)
        a = encode(parts.visible_ids, parts.visible_positions, params, CFG)
        b = encode(parts.visible_ids, parts.visible_positions, params, CFG)
        assert a.data.tobytes() == b.data.tobytes()


class TestFillAndDecode:
    def test_logits_shape(self, params):
        _, parts = masked_inputs(6)
        latent = encode(parts.visible_ids, parts.visible_positions, params, CFG)
        logits = fill_and_decode(latent, parts.visible_positions,
                                 parts.masked_positions, params, CFG)
        assert logits.shape == (CFG.seq_len, CFG.k)

    def test_no_masked_positions_smoke(self, params):
        ids = np.random.default_rng(7).integers(0, CFG.k, size=CFG.seq_len)
        pos = np.arange(CFG.seq_len)
        latent = encode(ids, pos, params, CFG)
        logits = fill_and_decode(latent, pos, np.zeros(0, dtype=np.int64), params, CFG)
        assert logits.shape == (CFG.seq_len, CFG.k)
        assert np.isfinite(logits.data).all()

    def test_position_gap_rejected(self, params):
        _, parts = masked_inputs(8)
        latent = encode(parts.visible_ids, parts.visible_positions, params, CFG)
        bad = parts.masked_positions.copy()
        bad[0] = parts.masked_positions[1]  # collision leaves a gap
        with pytest.raises(ContractError):
            fill_and_decode(latent, parts.visible_positions, bad, params, CFG)

    def test_masked_row_depends_on_positional_index(self, params):
        # same latent block presented with two different masked positions
        rng = np.random.default_rng(9)
        latent = eg.Tensor(rng.normal(size=(CFG.seq_len - 1, CFG.embed_dim))
                           .astype(np.float32))
        all_pos = np.arange(CFG.seq_len)
        for hole_a, hole_b in [(3, 40)]:
            vis_a = np.delete(all_pos, hole_a)
            vis_b = np.delete(all_pos, hole_b)
            la = fill_and_decode(latent, vis_a, np.array([hole_a]), params, CFG)
            lb = fill_and_decode(latent, vis_b, np.array([hole_b]), params, CFG)
            diff = np.abs(la.data[hole_a] - lb.data[hole_b]).max()
            assert diff > 0

    def test_mask_token_enters_only_at_masked_positions(self, params):
        # with nothing masked the decoder output cannot depend on the mask token
        ids = np.random.default_rng(10).integers(0, CFG.k, size=CFG.seq_len)
        pos = np.arange(CFG.seq_len)
        fresh = init_parameters(CFG, seed=1)
        latent = encode(ids, pos, fresh, CFG)
        before = fill_and_decode(latent, pos, np.zeros(0, dtype=np.int64), fresh, CFG)
        fresh["token_embed"].data[CFG.k] += 123.0
        latent2 = encode(ids, pos, fresh, CFG)
        after = fill_and_decode(latent2, pos, np.zeros(0, dtype=np.int64), fresh, CFG)
        assert before.data.tobytes() == after.data.tobytes()

    def test_mask_token_changes_masked_rows(self, params):
        _, parts = masked_inputs(10)
        fresh = init_parameters(CFG, seed=2)
        latent = encode(parts.visible_ids, parts.visible_positions, fresh, CFG)
        base = fill_and_decode(latent, parts.visible_positions,
                               parts.masked_positions, fresh, CFG)
        fresh["token_embed"].data[CFG.k] += 0.5
        latent2 = encode(parts.visible_ids, parts.visible_positions, fresh, CFG)
        bumped = fill_and_decode(latent2, parts.visible_positions,
                                 parts.masked_positions, fresh, CFG)
        assert np.abs(base.data - bumped.data).max() > 0


class TestContrastiveFeature:
    def test_unit_norm(self, params):
        rng = np.random.default_rng(11)
        latent = eg.Tensor(rng.normal(size=(4, 29, CFG.embed_dim)).astype(np.float32))
        z = contrastive_feature(latent, params)
        np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), np.ones(4), atol=1e-5)

    def test_duplication_invariance(self, params):
        rng = np.random.default_rng(12)
        latent = rng.normal(size=(1, 10, CFG.embed_dim)).astype(np.float32)
        z1 = contrastive_feature(eg.Tensor(latent), params)
        z2 = contrastive_feature(eg.Tensor(np.concatenate([latent, latent], axis=1)), params)
        np.testing.assert_allclose(z1.data, z2.data, atol=1e-6)

    def test_different_inputs_do_not_collapse(self, params):
        _, p1 = masked_inputs(13)
        _, p2 = masked_inputs(14)
        z1 = contrastive_feature(encode(p1.visible_ids, p1.visible_positions, params, CFG), params)
        z2 = contrastive_feature(encode(p2.visible_ids, p2.visible_positions, params, CFG), params)
        assert float(z1.data @ z2.data) < 0.999

    def test_empty_latent_rejected(self, params):
        with pytest.raises(ContractError):
            contrastive_feature(eg.Tensor(np.zeros((0, CFG.embed_dim), np.float32)), params)


class TestInitParameters:
    def test_same_seed_bitwise_identical(self):
        a = init_parameters(CFG, seed=3)
        b = init_parameters(CFG, seed=3)
        assert set(a) == set(b)
        for name in a:
            assert a[name].data.tobytes() == b[name].data.tobytes()

    def test_all_finite(self, params):
        for name, p in params.items():
            assert np.isfinite(p.data).all(), name

    def test_parameter_count_matches_shape_walk(self):
        # independent enumeration of every tensor in the architecture
        e, heads = CFG.embed_dim, CFG.num_heads
        hidden = int(round(e * CFG.mlp_ratio))
        block = (2 * e            # ln1
                 + e * e + e      # wq + bq
                 + e * e          # wk (no bias: softmax shift-invariant)
                 + e * e + e      # wv + bv
                 + e * e + e      # wo + bo
                 + 2 * e          # ln2
                 + e * hidden + hidden + hidden * e + e)
        expected = ((CFG.k + 1) * e                    # token table + mask token
                    + CFG.seq_len * e                  # positional table
                    + CFG.encoder_depth * block + 2 * e
                    + CFG.decoder_depth * block + 2 * e
                    + e * CFG.k + CFG.k                # decoder output projection
                    + e * e + e                        # head layer 1
                    + e * CFG.contrastive_dim + CFG.contrastive_dim)
        assert parameter_count(init_parameters(CFG, seed=0)) == expected

    def test_weight_std_near_002(self, params):
        w = params["enc.0.attn.wq"].data
        assert 0.01 < w.std() < 0.03
        assert np.abs(w).max() <= 0.04 + 1e-6  # truncated at two sigma


class TestWeightDecayPolicy:
    def test_biases_and_norms_exempt(self):
        assert weight_decay_multiplier("enc.0.ln1.gain", (32,), CFG) == 0.0
        assert weight_decay_multiplier("enc.0.attn.bq", (32,), CFG) == 0.0

    def test_positional_embeddings_exempt(self):
        assert weight_decay_multiplier("pos_embed", (64, 32), CFG) == 0.0

    def test_mask_token_row_exempt_table_decayed(self):
        mult = weight_decay_multiplier("token_embed", (CFG.k + 1, 32), CFG)
        assert mult.shape == (CFG.k + 1, 1)
        assert mult[CFG.k] == 0.0 and mult[:CFG.k].min() == 1.0

    def test_plain_weights_decayed(self):
        assert weight_decay_multiplier("enc.0.attn.wq", (32, 32), CFG) == 1.0
