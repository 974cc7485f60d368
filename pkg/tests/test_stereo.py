from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_oracle
from surgrecon.geometry import CameraIntrinsics, InvalidInputError
from surgrecon.stereo import (
    AttentionConfig, DepthMap, Status, StereoParams, attention_update, block_match_oracle,
    cost_model, estimate_depth, extract_features, lightweight_config, likelihood_entropy,
    match_row,
)


def _random_cfg(rng, c, n=1):
    w = rng.normal(size=(3, n, c, c)) / math.sqrt(c)
    return AttentionConfig(c, n, w[0], w[1], w[2])


class TestFeatures:
    def test_constant_image(self):
        f = extract_features(np.full((12, 15), 77.0))
        assert np.all(f == f[0, 0])
        assert np.all(f[..., 1:3] == 0)

    def test_shift_invariance_of_patch_channels(self, rng):
        img = rng.uniform(0, 200, size=(20, 20))
        np.testing.assert_allclose(extract_features(img)[..., 3:], extract_features(img + 50)[..., 3:], atol=1e-12)

    def test_vertical_step_edge(self):
        img = np.zeros((9, 20))
        img[:, 10:] = 255.0
        gx = extract_features(img)[4, :, 1]
        oracle = np.convolve(img[4], [0.5, 0, -0.5], mode="same") / 255.0
        np.testing.assert_allclose(gx[1:-1], oracle[1:-1], atol=1e-12)
        assert set(np.flatnonzero(gx == gx.max())) == {9, 10}

    def test_finite(self, rng):
        assert np.all(np.isfinite(extract_features(rng.uniform(0, 255, (8, 8, 3)))))

    def test_empty_image(self):
        with pytest.raises(InvalidInputError):
            extract_features(np.zeros((0, 5)))


class TestAttention:
    def test_single_target(self, rng):
        cfg = _random_cfg(rng, 5)
        tgt = rng.normal(size=(1, 5))
        out, _ = attention_update(rng.normal(size=(3, 5)), tgt, cfg)
        np.testing.assert_allclose(out, np.repeat(tgt @ cfg.w_v[0].T, 3, axis=0), atol=1e-15)

    def test_identical_targets_identity_weights(self, rng):
        eye = np.eye(4)
        cfg = AttentionConfig(4, 1, eye, eye, eye)
        tgt = np.repeat(rng.normal(size=(1, 4)), 6, axis=0)
        out, _ = attention_update(rng.normal(size=(3, 4)), tgt, cfg)
        np.testing.assert_allclose(out, tgt[:3], atol=1e-15)

    def test_3x4_oracle(self, rng):
        cfg = _random_cfg(rng, 8)
        src, tgt = rng.normal(size=(3, 8)), rng.normal(size=(4, 8))
        out, alpha = attention_update(src, tgt, cfg)
        o_out, o_alpha = attention_oracle(src, tgt, cfg.w_q[0], cfg.w_k[0], cfg.w_v[0])
        np.testing.assert_allclose(out, o_out, atol=1e-9, rtol=0)
        np.testing.assert_allclose(alpha, o_alpha, atol=1e-9, rtol=0)

    def test_dimension_mismatch(self, rng):
        cfg = _random_cfg(rng, 4)
        with pytest.raises(InvalidInputError):
            attention_update(rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), cfg)

    def test_mask_removing_all_candidates(self, rng):
        cfg = _random_cfg(rng, 4)
        with pytest.raises(InvalidInputError):
            attention_update(rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), cfg,
                             mask=np.zeros((2, 3), dtype=bool))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31 - 1))
    def test_target_permutation_equivariance(self, c, n, m, seed):
        rng = np.random.default_rng(seed)
        cfg = _random_cfg(rng, c)
        src, tgt = rng.normal(size=(n, c)), rng.normal(size=(m, c))
        perm = rng.permutation(m)
        out, alpha = attention_update(src, tgt, cfg)
        out_p, alpha_p = attention_update(src, tgt[perm], cfg)
        np.testing.assert_allclose(alpha_p, alpha[:, perm], atol=1e-12)
        np.testing.assert_allclose(out_p, out, atol=1e-12)

    def test_masked_weights_are_zero(self, rng):
        eye = np.eye(3)
        cfg = AttentionConfig(3, 1, eye, eye, eye)
        tgt = rng.normal(size=(4, 3))
        mask = np.array([[True, False, True, False]])
        # masking is the same as dropping the candidates
        src = rng.normal(size=(1, 3))
        out, _ = attention_update(src, tgt, cfg, mask=mask)
        o_out, _ = attention_oracle(src, tgt[[0, 2]], eye, eye, eye)
        np.testing.assert_allclose(out, o_out, atol=1e-12)


class TestMatchRow:
    @pytest.fixture
    def cfg(self):
        return AttentionConfig.create(16, 4, seed=0)

    def _pair(self, shift, w=96):
        row = np.linspace(0, 255, w + shift)
        img = np.tile(row, (7, 1))
        left, right = img[:, :w], img[:, shift:shift + w]
        return extract_features(left)[3], extract_features(right)[3]

    def test_zero_disparity(self, cfg):
        fl, fr = self._pair(0)
        lik = match_row(fl, fr, cfg, max_disp=20)
        assert np.all(lik.argmax(axis=1)[4:-4] == 0)

    @pytest.mark.parametrize("lightweight", [False, True])
    def test_shift_of_five(self, cfg, lightweight):
        fl, fr = self._pair(5)
        c = lightweight_config(cfg) if lightweight else cfg
        lik = match_row(fl, fr, c, max_disp=20)
        assert np.all(lik.argmax(axis=1)[8:-8] == 5)

    def test_rows_are_distributions(self, cfg, rng):
        img = rng.uniform(0, 255, size=(7, 64))
        f = extract_features(img)[3]
        lik = match_row(f, np.roll(f, 3, axis=0), cfg, max_disp=16)
        assert np.all(lik >= 0)
        np.testing.assert_allclose(lik.sum(axis=1), 1.0, atol=1e-9)
        u = np.arange(64)[:, None]
        assert np.all(lik[u - np.arange(17)[None, :] < 0] == 0)

    def test_textureless_entropy_is_log_candidates(self, cfg):
        f = extract_features(np.full((7, 64), 100.0))[3]
        lik = match_row(f, f, cfg, max_disp=16)
        n_cand = np.minimum(np.arange(64), 16) + 1
        np.testing.assert_allclose(likelihood_entropy(lik), np.log(n_cand), atol=1e-6)

    def test_shape_mismatch(self, cfg):
        with pytest.raises(InvalidInputError):
            match_row(np.zeros((10, 11)), np.zeros((11, 11)), cfg)


class TestEstimateDepth:
    @pytest.fixture
    def setup(self, small_K):
        return small_K, AttentionConfig.create(16, 4, seed=0)

    def test_identical_images_are_invalid(self, setup, rng):
        K, cfg = setup
        img = rng.uniform(0, 255, size=(K.height, K.width, 3))
        d = estimate_depth(img, img, K, cfg)
        assert not d.valid.any()
        assert np.all(np.isnan(d.depth))

    def test_textureless_never_valid(self, setup):
        K, cfg = setup
        img = np.full((K.height, K.width), 90.0)
        d = estimate_depth(img, img + 0.0, K, cfg)
        assert not np.any(d.status == Status.VALID)

    def test_size_mismatch(self, setup):
        K, cfg = setup
        with pytest.raises(InvalidInputError):
            estimate_depth(np.zeros((10, 10)), np.zeros((10, 10)), K, cfg)

    def test_shifted_texture(self, setup, rng):
        K, cfg = setup
        shift = 6
        base = rng.uniform(0, 255, size=(K.height, K.width + shift))
        left, right = base[:, :K.width], base[:, shift:shift + K.width]
        d = estimate_depth(left, right, K, cfg)
        interior = d.valid[:, 12:-4]
        assert interior.mean() > 0.9
        assert np.all(np.abs(d.disparity[:, 12:-4][interior] - shift) <= 0.5)
        # the strip seen by the left view only is mostly flagged
        assert np.mean(~d.valid[:, :shift]) >= 0.9

    def test_depth_range_respected(self, setup, rng):
        K, cfg = setup
        base = rng.uniform(0, 255, size=(K.height, K.width + 4))
        params = StereoParams(z_min=0.01, z_max=0.15)
        d = estimate_depth(base[:, :K.width], base[:, 4:4 + K.width], K, cfg, params)
        vals = d.depth[d.valid]
        assert np.all((vals > 0.01) & (vals < 0.15))
        assert np.all(np.isnan(d.depth[~d.valid]))

    def test_bit_identical_runs(self, setup, rng):
        K, cfg = setup
        base = rng.uniform(0, 255, size=(K.height, K.width + 5))
        a = estimate_depth(base[:, :K.width], base[:, 5:5 + K.width], K, cfg)
        b = estimate_depth(base[:, :K.width], base[:, 5:5 + K.width], K, AttentionConfig.create(16, 4, seed=0))
        assert a.depth.tobytes() == b.depth.tobytes()
        assert a.status.tobytes() == b.status.tobytes()

    def test_from_depth_range(self):
        d = DepthMap.from_depth(np.array([[0.0, 0.05, np.inf, 2.0]]), z_min=0.01, z_max=1.0)
        assert d.valid.tolist() == [[False, True, False, False]]


class TestCostModel:
    def test_base_flops(self):
        cfg = AttentionConfig.create(128, 24)
        params, flops = cost_model(512, 640, cfg)
        assert flops == 5_033_164_800
        assert params == 3 * 393_216

    def test_unit_case(self):
        cfg = AttentionConfig.create(1, 1)
        assert cost_model(7, 9, cfg) == (3, 7 * 81)

    def test_lightweight_shapes(self):
        lw = lightweight_config(AttentionConfig.create(128, 24))
        assert (lw.c_attn, lw.n_attn) == (256, 6)
        assert lw.c_attn ** 2 * lw.n_attn == 128 ** 2 * 24 == 393_216
        assert (lightweight_config(AttentionConfig.create(1, 4)).c_attn, 1) == (2, 1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 6), st.integers(1, 2000), st.integers(1, 2000))
    def test_quarter_flops_same_params(self, c, n4, h, w):
        base = AttentionConfig.create(c, 4 * n4)
        p0, f0 = cost_model(h, w, base)
        p1, f1 = cost_model(h, w, lightweight_config(base))
        assert p1 == p0
        assert 4 * f1 == f0

    def test_indivisible(self):
        with pytest.raises(InvalidInputError):
            lightweight_config(AttentionConfig.create(4, 6))

    def test_lightweight_is_seeded(self):
        base = AttentionConfig.create(16, 4, seed=3)
        a, b = lightweight_config(base), lightweight_config(base)
        assert np.array_equal(a.w_q, b.w_q)

    def test_bad_size(self):
        with pytest.raises(InvalidInputError):
            cost_model(0, 10, AttentionConfig.create(2, 1))


class TestBlockMatch:
    def test_shifted_copy(self, rng):
        base = rng.uniform(0, 255, size=(40, 90))
        left, right = base[:, :80], base[:, 7:87]
        d = block_match_oracle(left, right, 16)
        assert np.all(d[6:-6, 20:-6] == 7)

    def test_identical(self, rng):
        img = rng.uniform(0, 255, size=(30, 40))
        assert np.all(block_match_oracle(img, img, 8)[5:-5, 5:-5] == 0)
