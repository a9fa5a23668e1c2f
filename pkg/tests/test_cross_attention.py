"""Tests for query-exchanged cross-attention and heatmap rendering."""

import math

import numpy as np
import pytest
import torch

from src.cross_attention import (AttentionParams, FeatureMap, IdentityExchange, Modality, attention_heatmap,
                                 exchange_queries, flatten_grid, project_qkv, scaled_attention,
                                 sinusoidal_position_encoding, unflatten_grid)
from src.errors import ConfigurationError, NumericError, ShapeError, ValidationError


def _params(in_dim: int, d_model: int, n_heads: int, seed: int, bias: bool = True) -> AttentionParams:
    torch.manual_seed(seed)
    return AttentionParams(in_dim, d_model, n_heads, bias=bias).double()


class TestProjection:
    def test_row_major_flattening(self):
        values = torch.arange(2 * 4 * 2 * 3, dtype=torch.float64).reshape(2, 4, 2, 3)
        seq = flatten_grid(values)
        assert seq.shape == (2, 6, 4)
        # position (row 1, col 2) is index 5
        torch.testing.assert_close(seq[0, 5], values[0, :, 1, 2])
        torch.testing.assert_close(unflatten_grid(seq, (2, 3)), values)

    def test_zero_features_without_bias(self):
        params = _params(4, 8, 2, seed=0, bias=False)
        q, k, v = project_qkv(FeatureMap(torch.zeros(1, 4, 2, 3, dtype=torch.float64), Modality.RGB), params)
        assert q.shape == (1, 6, 8)
        assert torch.count_nonzero(q) == 0 and torch.count_nonzero(k) == 0 and torch.count_nonzero(v) == 0

    def test_zero_features_with_bias_give_bias_rows(self):
        params = _params(4, 8, 2, seed=0)
        q, _, _ = project_qkv(FeatureMap(torch.zeros(1, 4, 2, 3, dtype=torch.float64), Modality.RGB), params)
        torch.testing.assert_close(q[0], params.q_proj.bias.detach().expand(6, 8))

    def test_identity_projection(self, rng):
        params = _params(4, 4, 1, seed=0, bias=False)
        with torch.no_grad():
            params.q_proj.weight.copy_(torch.eye(4, dtype=torch.float64))
        values = torch.from_numpy(rng.random((1, 4, 2, 3)))
        q, _, _ = project_qkv(FeatureMap(values, Modality.IR), params)
        torch.testing.assert_close(q, flatten_grid(values))

    def test_depth_mismatch_names_both(self):
        params = _params(4, 8, 2, seed=0)
        with pytest.raises(ShapeError, match='5.*4'):
            project_qkv(FeatureMap(torch.zeros(1, 5, 2, 2, dtype=torch.float64), Modality.RGB), params)

    def test_heads_must_divide_model_dim(self):
        with pytest.raises(ConfigurationError):
            AttentionParams(4, 6, 4)


class TestScaledAttention:
    def test_hand_evaluated_softmax(self):
        eye = torch.eye(2, dtype=torch.float64)
        _, weights = scaled_attention(eye, eye, eye, n_heads=1)
        a, b = math.exp(1 / math.sqrt(2)), 1.0
        np.testing.assert_allclose(weights[0].numpy(), [a / (a + b), b / (a + b)], atol=1e-12)
        np.testing.assert_allclose(weights[0].numpy(), [0.6698, 0.3302], atol=1e-4)

    def test_identical_keys_give_uniform_rows(self, rng):
        q = torch.from_numpy(rng.normal(size=(5, 8)))
        k = torch.from_numpy(np.tile(rng.normal(size=(1, 8)), (7, 1)))
        v = torch.from_numpy(rng.normal(size=(7, 8)))
        _, weights = scaled_attention(q, k, v, n_heads=2)
        np.testing.assert_allclose(weights.numpy(), 1.0 / 7, atol=1e-6)

    def test_single_key_broadcasts_value(self, rng):
        q = torch.from_numpy(rng.normal(size=(4, 6)))
        k = torch.from_numpy(rng.normal(size=(1, 6)))
        v = torch.from_numpy(rng.normal(size=(1, 6)))
        attended, weights = scaled_attention(q, k, v, n_heads=3)
        np.testing.assert_array_equal(weights.numpy(), np.ones((4, 1)))
        torch.testing.assert_close(attended, v.expand(4, 6))

    def test_rows_are_stochastic(self, rng):
        for _ in range(1000):
            n, m = rng.integers(1, 12, size=2)
            q = torch.from_numpy(rng.normal(scale=3.0, size=(2, n, 8)))
            k = torch.from_numpy(rng.normal(scale=3.0, size=(2, m, 8)))
            v = torch.from_numpy(rng.normal(size=(2, m, 8)))
            _, weights = scaled_attention(q, k, v, n_heads=4)
            assert weights.shape == (2, n, m)
            assert bool((weights >= 0).all())
            np.testing.assert_allclose(weights.sum(dim=-1).numpy(), 1.0, atol=1e-6)

    def test_key_permutation_permutes_columns(self, rng):
        q = torch.from_numpy(rng.normal(size=(3, 4)))
        k = torch.from_numpy(rng.normal(size=(5, 4)))
        v = torch.from_numpy(rng.normal(size=(5, 4)))
        perm = torch.from_numpy(rng.permutation(5))
        attended, weights = scaled_attention(q, k, v, n_heads=2)
        attended_p, weights_p = scaled_attention(q, k[perm], v[perm], n_heads=2)
        torch.testing.assert_close(weights_p, weights[:, perm])
        torch.testing.assert_close(attended_p, attended)

    def test_non_finite_logits(self):
        q = torch.full((2, 4), float('nan'), dtype=torch.float64)
        k = torch.ones(3, 4, dtype=torch.float64)
        with pytest.raises(NumericError):
            scaled_attention(q, k, k, n_heads=1)

    def test_projection_gradients_match_finite_differences(self, rng):
        x_rgb = torch.from_numpy(rng.normal(size=(1, 16, 4)))
        x_ir = torch.from_numpy(rng.normal(size=(1, 9, 4)))
        weights = [torch.from_numpy(rng.normal(scale=0.5, size=(4, 4))).requires_grad_() for _ in range(3)]

        def readout(w_q, w_k, w_v):
            attended, _ = scaled_attention(x_rgb @ w_q.T, x_ir @ w_k.T, x_ir @ w_v.T, n_heads=2)
            return (attended ** 2).sum()

        assert torch.autograd.gradcheck(readout, weights, eps=1e-6, atol=1e-8, rtol=1e-4)


class TestExchangeQueries:
    def test_map_shapes_follow_grids(self, rng):
        feat_rgb = FeatureMap(torch.from_numpy(rng.random((1, 8, 8, 8))), Modality.RGB)
        feat_ir = FeatureMap(torch.from_numpy(rng.random((1, 8, 6, 6))), Modality.IR)
        attended_rgb, attended_ir, (map_rgb_to_ir, map_ir_to_rgb) = exchange_queries(
            feat_rgb, feat_ir, _params(8, 16, 4, 0), _params(8, 16, 4, 1))
        assert map_rgb_to_ir.shape == (1, 64, 36)
        assert map_ir_to_rgb.shape == (1, 36, 64)
        assert attended_ir.grid == (8, 8) and attended_ir.modality == Modality.IR
        assert attended_rgb.grid == (6, 6) and attended_rgb.modality == Modality.RGB

    def test_swapping_modalities_swaps_outputs(self, rng):
        a = FeatureMap(torch.from_numpy(rng.random((2, 8, 4, 4))), Modality.RGB)
        b = FeatureMap(torch.from_numpy(rng.random((2, 8, 3, 5))), Modality.IR)
        pa, pb = _params(8, 8, 2, 0), _params(8, 8, 2, 1)
        att_rgb, att_ir, (m1, m2) = exchange_queries(a, b, pa, pb)
        swapped_rgb, swapped_ir, (s1, s2) = exchange_queries(
            FeatureMap(b.values, Modality.RGB), FeatureMap(a.values, Modality.IR), pb, pa)
        torch.testing.assert_close(swapped_ir.values, att_rgb.values)
        torch.testing.assert_close(swapped_rgb.values, att_ir.values)
        torch.testing.assert_close(s1, m2)
        torch.testing.assert_close(s2, m1)

    def test_disagreeing_heads(self, rng):
        feat = FeatureMap(torch.from_numpy(rng.random((1, 8, 2, 2))), Modality.RGB)
        with pytest.raises(ShapeError):
            exchange_queries(feat, feat, _params(8, 8, 2, 0), _params(8, 8, 4, 0))

    def test_identity_exchange_passes_through(self, rng):
        a = FeatureMap(torch.from_numpy(rng.random((1, 4, 2, 2))), Modality.RGB)
        b = FeatureMap(torch.from_numpy(rng.random((1, 4, 2, 2))), Modality.IR)
        out_a, out_b, maps = IdentityExchange()(a, b)
        assert out_a is a and out_b is b and maps is None
        assert not list(IdentityExchange().parameters())


class TestPositionEncoding:
    def test_shape_and_range(self):
        enc = sinusoidal_position_encoding(3, 5, 8)
        assert enc.shape == (15, 8)
        assert float(enc.abs().max()) <= 1.0

    def test_dimension_must_divide_by_four(self):
        with pytest.raises(ConfigurationError):
            sinusoidal_position_encoding(2, 2, 6)


class TestHeatmap:
    def test_uniform_map_is_half(self):
        heat = attention_heatmap(np.full((64, 36), 1 / 36), (6, 6))
        assert heat.shape == (6, 6, 1)
        np.testing.assert_array_equal(heat, 0.5)

    def test_one_hot_row(self):
        weights = np.zeros((4, 9))
        weights[2, 7] = 1.0
        heat = attention_heatmap(weights, (3, 3), focus_query=2)
        expected = np.zeros((3, 3, 1), dtype=np.float32)
        expected[2, 1, 0] = 1.0
        np.testing.assert_array_equal(heat, expected)

    def test_mean_over_rows(self, rng):
        weights = rng.random((64, 36))
        heat = attention_heatmap(torch.from_numpy(weights)[None], (6, 6))
        assert heat.shape == (6, 6, 1)
        assert heat.min() == 0.0 and heat.max() == 1.0

    def test_row_col_focus(self):
        weights = np.zeros((6, 4))
        weights[4, 0] = 1.0
        heat = attention_heatmap(weights, (2, 2), focus_query=(1, 1), query_grid=(2, 3))
        assert heat[0, 0, 0] == 1.0

    def test_focus_outside_grid(self):
        with pytest.raises(ValidationError):
            attention_heatmap(np.ones((4, 4)) / 4, (2, 2), focus_query=(2, 0), query_grid=(2, 2))

    def test_grid_mismatch(self):
        with pytest.raises(ShapeError):
            attention_heatmap(np.ones((4, 4)) / 4, (3, 3))
