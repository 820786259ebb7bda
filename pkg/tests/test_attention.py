import dataclasses

import numpy as np
import pytest

from conftest import conv_oracle
from leafmask.attention import (
    Arrangement,
    apply_dual_attention,
    bases_decoder,
    channel_attention_map,
    hidden_width,
    init_attention,
    init_channel_attention,
    init_decoder,
    init_spatial_attention,
    parse_arrangement,
    spatial_attention_map,
)
from leafmask.errors import ConfigError, ShapeError
from leafmask.params import flatten, unflatten

MODES = list(Arrangement)


def sig(x):
    return 1 / (1 + np.exp(-x))


def random_params(obj, rng, scale=0.5):
    return unflatten(obj, {k: rng.standard_normal(v.shape) * scale for k, v in flatten(obj).items()})


def spatial_oracle(x, p):
    pooled = np.concatenate([x.mean(1, keepdims=True), x.max(1, keepdims=True)], axis=1)
    g = conv_oracle(pooled, p.global_conv1.weight, p.global_conv1.bias, 1)
    g = conv_oracle(np.maximum(g, 0), p.global_conv2.weight, p.global_conv2.bias, 1)
    l = conv_oracle(x, p.local_conv1.weight, p.local_conv1.bias, 0)
    l = conv_oracle(np.maximum(l, 0), p.local_conv2.weight, p.local_conv2.bias, 0)
    return sig(g + l)


def channel_oracle(x, p):
    def mlp(d, c1, c2):
        h = conv_oracle(d, c1.weight, c1.bias, 0)
        return conv_oracle(np.maximum(h, 0), c2.weight, c2.bias, 0)

    avg = x.mean(axis=(2, 3), keepdims=True)
    mx = x.max(axis=(2, 3), keepdims=True)
    g = mlp(avg, p.shared_conv1, p.shared_conv2) + mlp(mx, p.shared_conv1, p.shared_conv2)
    return sig(mlp(x, p.local_conv1, p.local_conv2) + g)


class TestSpatial:
    def test_zero_params_give_half(self, rng):
        p = init_spatial_attention(6, 2, zero=True)
        out = spatial_attention_map(rng.standard_normal((2, 6, 5, 4)).astype(np.float32), p)
        assert out.shape == (2, 1, 5, 4)
        assert np.all(out == 0.5)

    def test_hand_set_tiny_example(self):
        p = init_spatial_attention(2, 1, dtype=np.float64, zero=True)
        g1 = np.zeros_like(p.global_conv1.weight)
        g1[:, 0, 1, 1] = 1.0  # centre taps only: acts as a 1x1 on the avg map
        g1[:, 1, 1, 1] = -0.5
        g2 = np.zeros_like(p.global_conv2.weight)
        g2[0, :, 1, 1] = 1.0
        l1 = np.array([[[[1.0]], [[2.0]]], [[[-1.0]], [[1.0]]]])
        l2 = np.array([[[[0.5]], [[0.25]]]])
        p = dataclasses.replace(
            p,
            global_conv1=dataclasses.replace(p.global_conv1, weight=g1),
            global_conv2=dataclasses.replace(p.global_conv2, weight=g2),
            local_conv1=dataclasses.replace(p.local_conv1, weight=l1),
            local_conv2=dataclasses.replace(p.local_conv2, weight=l2),
        )
        x = np.array([[[[1.0, -2.0], [0.5, 3.0]], [[2.0, 1.0], [-1.0, 0.0]]]])
        np.testing.assert_allclose(spatial_attention_map(x, p), spatial_oracle(x, p), atol=1e-12)

    def test_random_params_match_oracle(self, rng):
        p = random_params(init_spatial_attention(5, 2, dtype=np.float64), rng)
        x = rng.standard_normal((2, 5, 4, 3))
        np.testing.assert_allclose(spatial_attention_map(x, p), spatial_oracle(x, p), atol=1e-12)

    def test_channel_mismatch(self, rng):
        p = init_spatial_attention(4, 2)
        with pytest.raises(ShapeError):
            spatial_attention_map(np.zeros((1, 3, 2, 2), np.float32), p)

    def test_global_width_uses_4c_over_r(self):
        p = init_spatial_attention(8, 4)
        assert p.global_conv1.weight.shape == (8, 2, 3, 3)
        assert p.local_conv1.weight.shape == (2, 8, 1, 1)


class TestChannel:
    def test_zero_params_give_half(self, rng):
        p = init_channel_attention(4, 2, zero=True)
        out = channel_attention_map(rng.standard_normal((1, 4, 3, 3)).astype(np.float32), p)
        assert out.shape == (1, 4, 3, 3) and np.all(out == 0.5)

    def test_spatially_constant_input(self, rng):
        p = random_params(init_channel_attention(4, 2, dtype=np.float64), rng)
        x = np.broadcast_to(rng.standard_normal((1, 4, 1, 1)), (1, 4, 5, 6)).copy()
        out = channel_attention_map(x, p)
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :, :1, :1], out.shape), atol=0)

    def test_matches_oracle(self, rng):
        p = random_params(init_channel_attention(6, 4, dtype=np.float64), rng)
        x = rng.standard_normal((2, 6, 3, 4))
        np.testing.assert_allclose(channel_attention_map(x, p), channel_oracle(x, p), atol=1e-12)

    def test_permutation_equivariance(self, rng):
        p = random_params(init_channel_attention(5, 2), rng)
        p = unflatten(p, {k: v.astype(np.float32) for k, v in flatten(p).items()})
        x = rng.standard_normal((1, 5, 4, 6)).astype(np.float32)
        base = channel_attention_map(x, p)
        for _ in range(10):
            perm = rng.permutation(24)
            xp = x.reshape(1, 5, 24)[:, :, perm].reshape(x.shape)
            want = base.reshape(1, 5, 24)[:, :, perm].reshape(x.shape)
            np.testing.assert_array_equal(channel_attention_map(xp, p), want)

    def test_hidden_width(self):
        assert hidden_width(16, 16) == 1
        assert hidden_width(17, 16) == 2
        assert hidden_width(3, 16) == 1


class TestDualAttention:
    @pytest.mark.parametrize("mode", MODES)
    def test_zero_fixed_point(self, rng, mode):
        a = init_attention(6, 2, mode, zero=True)
        x = rng.standard_normal((2, 6, 3, 5)).astype(np.float32)
        z = apply_dual_attention(x, a.spatial, a.channel, mode)
        np.testing.assert_allclose(z, 0.25 * x, rtol=1e-6, atol=0)

    @pytest.mark.parametrize("mode", MODES)
    def test_never_amplifies(self, rng, mode):
        a = random_params(init_attention(4, 2, mode, dtype=np.float64), rng, scale=2.0)
        x = rng.standard_normal((1, 4, 5, 5)) * 10
        z = apply_dual_attention(x, a.spatial, a.channel, mode)
        assert z.shape == x.shape
        assert np.all(np.abs(z) <= np.abs(x))

    def test_arrangement_formulas(self, rng):
        a = random_params(init_attention(4, 2, dtype=np.float64), rng)
        sp, ch = a.spatial, a.channel
        x = rng.standard_normal((1, 4, 3, 3))
        y = x * spatial_oracle(x, sp)
        np.testing.assert_allclose(apply_dual_attention(x, sp, ch, "spatial_then_channel"),
                                   y * channel_oracle(y, ch), atol=1e-12)
        y = x * channel_oracle(x, ch)
        np.testing.assert_allclose(apply_dual_attention(x, sp, ch, "channel_then_spatial"),
                                   y * spatial_oracle(y, sp), atol=1e-12)
        np.testing.assert_allclose(apply_dual_attention(x, sp, ch, "parallel"),
                                   x * spatial_oracle(x, sp) * channel_oracle(x, ch), atol=1e-12)

    def test_shared_equals_parallel_with_copied_weights(self, rng):
        a = random_params(init_attention(4, 2, dtype=np.float64), rng)
        ch = dataclasses.replace(a.channel, local_conv1=a.spatial.local_conv1)
        x = rng.standard_normal((2, 4, 3, 3))
        par = apply_dual_attention(x, a.spatial, ch, Arrangement.PARALLEL)
        shared = apply_dual_attention(x, a.spatial, a.channel, Arrangement.PARALLEL_SHARED)
        np.testing.assert_array_equal(par, shared)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            parse_arrangement("diagonal")
        a = init_attention(2, 2)
        with pytest.raises(ConfigError):
            apply_dual_attention(np.zeros((1, 2, 2, 2), np.float32), a.spatial, a.channel, "sideways")

    def test_default_mode(self):
        assert init_attention(4).mode is Arrangement.SPATIAL_THEN_CHANNEL


class TestBasesDecoder:
    @pytest.mark.parametrize("K", [1, 2, 4, 8])
    def test_channel_count(self, rng, K):
        d = init_decoder(3, 4, K, reduction=2, rng=rng)
        out = bases_decoder(rng.standard_normal((2, 3, 5, 6)).astype(np.float32), d, K=K)
        assert out.shape == (2, K, 10, 12)

    def test_zero_final_conv(self, rng):
        d = init_decoder(3, 4, 4, reduction=2, rng=rng, zero_final=True)
        assert np.all(bases_decoder(rng.standard_normal((1, 3, 4, 4)).astype(np.float32), d) == 0)

    def test_k_mismatch(self, rng):
        d = init_decoder(3, 4, 4, reduction=2, rng=rng)
        with pytest.raises(ConfigError, match="K mismatch"):
            bases_decoder(np.zeros((1, 3, 4, 4), np.float32), d, K=2)

    def test_attention_override(self, rng):
        d = init_decoder(3, 4, 2, reduction=2, rng=rng)
        x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        zero = init_attention(4, 2, zero=True)
        assert not np.array_equal(bases_decoder(x, d), bases_decoder(x, d, attention=zero))
