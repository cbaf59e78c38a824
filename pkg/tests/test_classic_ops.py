import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evolution.classic_ops import (
    ConvWeights,
    InvolutionWeights,
    PosEncoding,
    SaWeights,
    attention_probabilities,
    conv2d,
    involution_apply,
    involution_kernel,
    local_self_attention,
)
from evolution.tensor import ConfigurationError, InvalidShapeError, prng_fill

import oracles


def _involution_weights(d, r, k, groups, seed):
    return InvolutionWeights(
        w0=prng_fill([d // r, d], seed),
        w1=prng_fill([k * k * groups, d // r], seed + 1),
        gamma=prng_fill([d // r], seed + 2),
        beta=prng_fill([d // r], seed + 3),
        r=r,
        k=k,
        groups=groups,
    )


class TestConv2d:
    def test_identity_1x1(self):
        x = prng_fill([3, 4, 3], 1)
        w = ConvWeights(np.eye(3).reshape(1, 1, 3, 3))
        assert np.array_equal(conv2d(x, w), x)

    def test_delta_response(self):
        x = np.zeros((6, 6, 1))
        x[2, 3, 0] = 1.0
        y = conv2d(x, ConvWeights(np.ones((3, 3, 1, 1))))
        expected = np.zeros((6, 6, 1))
        expected[1:4, 2:5] = 1.0
        assert np.array_equal(y, expected)

    def test_matches_loop_oracle(self):
        w = prng_fill([3, 3, 2, 3], 7)
        x = prng_fill([4, 4, 2], 8)
        assert np.max(np.abs(conv2d(x, ConvWeights(w)) - oracles.conv2d(x, w))) <= 1e-12

    @pytest.mark.parametrize("k", [1, 5])
    def test_matches_loop_oracle_other_windows(self, k):
        w = prng_fill([k, k, 3, 2], 70 + k)
        x = prng_fill([5, 6, 3], 80 + k)
        assert np.max(np.abs(conv2d(x, ConvWeights(w)) - oracles.conv2d(x, w))) <= 1e-12

    @given(st.integers(0, 2), st.integers(0, 2), st.integers(0, 10**6))
    @settings(max_examples=30)
    def test_delta_translation(self, s, t, seed):
        w = ConvWeights(prng_fill([3, 3, 1, 2], seed))
        x = np.zeros((9, 9, 1))
        x[3, 3, 0] = 1.0
        shifted = np.zeros_like(x)
        shifted[3 + s, 3 + t, 0] = 1.0
        y = conv2d(x, w)
        y_shift = conv2d(shifted, w)
        assert np.array_equal(y_shift[s:, t:], y[: 9 - s, : 9 - t])

    def test_depth_mismatch(self):
        with pytest.raises(InvalidShapeError):
            conv2d(np.zeros((3, 3, 2)), ConvWeights(np.zeros((3, 3, 3, 1))))

    def test_even_window_rejected(self):
        with pytest.raises(ConfigurationError):
            ConvWeights(np.zeros((2, 2, 1, 1)))


class TestLocalSelfAttention:
    def test_uniform_attention_when_scores_vanish(self):
        x = prng_fill([5, 5, 3], 2)
        wv = prng_fill([3, 2], 3)
        w = SaWeights.single_head(np.zeros((3, 2)), np.zeros((3, 2)), wv)
        y = local_self_attention(x, w, 3, 1)
        i, j = 2, 2
        expected = sum(x[i - a, j - b] for a in (-1, 0, 1) for b in (-1, 0, 1)) @ wv / 9
        assert np.max(np.abs(y[i, j] - expected)) <= 1e-12

    def test_window_of_one(self):
        x = prng_fill([4, 3, 3], 5)
        w = SaWeights.single_head(prng_fill([3, 2], 6), prng_fill([3, 2], 7), prng_fill([3, 4], 8))
        assert np.max(np.abs(local_self_attention(x, w, 1) - x @ w.wv[0])) <= 1e-12

    def test_multi_head_matches_per_pixel_oracle(self):
        wq = prng_fill([2, 4, 3], 11)
        wk = prng_fill([2, 4, 3], 12)
        wv = prng_fill([2, 4, 2], 13)
        wo = prng_fill([4, 4], 14)
        x = prng_fill([5, 5, 4], 15)
        w = SaWeights(wq=wq, wk=wk, wv=wv, wo=wo)
        expected = oracles.local_self_attention(x, list(wq), list(wk), list(wv), 3, wo=wo)
        assert np.max(np.abs(local_self_attention(x, w, 3, 2) - expected)) <= 1e-12

    def test_absolute_encoding_matches_oracle(self):
        x = prng_fill([4, 5, 3], 20)
        p = prng_fill([4, 5, 3], 21)
        wq, wk, wv = prng_fill([3, 2], 22), prng_fill([3, 2], 23), prng_fill([3, 2], 24)
        w = SaWeights.single_head(wq, wk, wv, PosEncoding("absolute", p=p))
        expected = oracles.local_self_attention(x, [wq], [wk], [wv], 3, pos=("absolute", p))
        assert np.max(np.abs(local_self_attention(x, w, 3) - expected)) <= 1e-12

    def test_absolute_encoding_leaves_values_alone(self):
        # with zero query/key weights the encoding has nothing to act on
        x = prng_fill([4, 4, 2], 1)
        wv = prng_fill([2, 2], 2)
        zero = np.zeros((2, 2))
        plain = SaWeights.single_head(zero, zero, wv)
        shifted = SaWeights.single_head(zero, zero, wv, PosEncoding("absolute", p=prng_fill([4, 4, 2], 3)))
        assert np.array_equal(local_self_attention(x, plain, 3), local_self_attention(x, shifted, 3))

    def test_relative_encoding_matches_oracle(self):
        x = prng_fill([4, 4, 3], 30)
        wq, wk, wv = prng_fill([2, 3, 2], 31), prng_fill([2, 3, 2], 32), prng_fill([2, 3, 2], 33)
        wo = prng_fill([4, 3], 34)
        r_table, wk_hat = prng_fill([3, 3, 4], 35), prng_fill([2, 4, 2], 36)
        u, v = prng_fill([2, 2], 37), prng_fill([2, 2], 38)
        pos = PosEncoding("relative", r_table=r_table, wk_hat=wk_hat, u=u, v=v)
        w = SaWeights(wq=wq, wk=wk, wv=wv, wo=wo, pos=pos)
        expected = oracles.local_self_attention(
            x, list(wq), list(wk), list(wv), 3, wo=wo,
            pos=("relative", r_table, list(wk_hat), list(u), list(v)),
        )
        assert np.max(np.abs(local_self_attention(x, w, 3, 2) - expected)) <= 1e-12

    @pytest.mark.parametrize("kind", ["none", "absolute", "relative"])
    def test_probabilities_sum_to_one(self, kind):
        h, wd, d, k = 6, 5, 4, 5
        pos = {
            "none": PosEncoding(),
            "absolute": PosEncoding("absolute", p=prng_fill([h, wd, d], 1)),
            "relative": PosEncoding("relative", r_table=prng_fill([k, k, 3], 2),
                                    wk_hat=prng_fill([1, 3, 2], 3), u=prng_fill([1, 2], 4),
                                    v=prng_fill([1, 2], 5)),
        }[kind]
        w = SaWeights.single_head(prng_fill([d, 2], 6) * 3, prng_fill([d, 2], 7) * 3, prng_fill([d, 2], 8), pos)
        probs = attention_probabilities(prng_fill([h, wd, d], 9), w, k)
        assert np.max(np.abs(probs.sum(axis=(-2, -1)) - 1.0)) <= 1e-12

    def test_zero_scores_equal_uniform_conv(self):
        x = prng_fill([6, 5, 3], 40)
        wv = prng_fill([3, 4], 41)
        w = SaWeights.single_head(np.zeros((3, 2)), np.zeros((3, 2)), wv)
        conv_w = ConvWeights(np.broadcast_to(wv / 9, (3, 3, 3, 4)))
        assert np.max(np.abs(local_self_attention(x, w, 3) - conv2d(x, conv_w))) <= 1e-9

    def test_missing_positional_payload(self):
        with pytest.raises(ConfigurationError):
            PosEncoding("absolute")
        with pytest.raises(ConfigurationError):
            PosEncoding("relative", r_table=np.zeros((3, 3, 2)))

    def test_multi_head_requires_wo(self):
        with pytest.raises(ConfigurationError):
            SaWeights(wq=np.zeros((2, 2, 2)), wk=np.zeros((2, 2, 2)), wv=np.zeros((2, 2, 2)))

    def test_head_count_mismatch(self):
        w = SaWeights.single_head(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ConfigurationError):
            local_self_attention(np.zeros((3, 3, 2)), w, 3, 2)


class TestInvolution:
    def test_zero_w1_gives_zero_kernel(self):
        w = _involution_weights(4, 2, 3, 1, 1)
        w = InvolutionWeights(w.w0, np.zeros_like(w.w1), w.gamma, w.beta, r=2, k=3)
        assert not involution_kernel(prng_fill([3, 3, 4], 2), w).any()

    def test_zero_pixel_and_zero_beta(self):
        w = _involution_weights(4, 2, 3, 1, 3)
        w = InvolutionWeights(w.w0, w.w1, w.gamma, np.zeros(2), r=2, k=3)
        x = prng_fill([3, 3, 4], 4)
        x[1, 2] = 0.0
        assert not involution_kernel(x, w)[1, 2].any()

    def test_kernel_matches_bottleneck_oracle(self):
        w = InvolutionWeights(
            w0=prng_fill([2, 4], 21), w1=prng_fill([9, 2], 22),
            gamma=prng_fill([2], 23), beta=prng_fill([2], 24), r=2, k=3,
        )
        x = prng_fill([3, 3, 4], 25)
        expected = oracles.involution_kernel(x, w.w0, w.w1, w.gamma, w.beta, 3, 1)
        assert np.max(np.abs(involution_kernel(x, w) - expected)) <= 1e-12

    def test_grouped_kernel_matches_oracle(self):
        w = _involution_weights(6, 3, 3, 3, 50)
        x = prng_fill([4, 3, 6], 55)
        expected = oracles.involution_kernel(x, w.w0, w.w1, w.gamma, w.beta, 3, 3)
        assert np.max(np.abs(involution_kernel(x, w) - expected)) <= 1e-12

    def test_apply_delta_kernel_is_identity(self):
        x = prng_fill([4, 5, 3], 1)
        kern = np.zeros((4, 5, 3, 3, 1))
        kern[:, :, 1, 1, 0] = 1.0
        assert np.array_equal(involution_apply(x, kern), x)

    def test_apply_zero_kernel(self):
        x = prng_fill([4, 4, 2], 1)
        assert not involution_apply(x, np.zeros((4, 4, 3, 3, 2))).any()

    def test_apply_matches_loop_oracle(self):
        x = prng_fill([4, 4, 4], 60)
        kern = prng_fill([4, 4, 3, 3, 2], 61)
        assert np.max(np.abs(involution_apply(x, kern) - oracles.involution_apply(x, kern))) <= 1e-12

    def test_depthwise_when_groups_equal_channels(self):
        x = prng_fill([5, 5, 3], 70)
        kern = prng_fill([5, 5, 3, 3, 3], 71)
        base = involution_apply(x, kern)
        x2 = x.copy()
        x2[..., 1] += prng_fill([5, 5], 72)
        changed = involution_apply(x2, kern)
        assert np.array_equal(changed[..., [0, 2]], base[..., [0, 2]])
        assert not np.array_equal(changed[..., 1], base[..., 1])

    def test_output_depth_equals_input_depth(self):
        w = _involution_weights(8, 4, 5, 2, 80)
        x = prng_fill([3, 4, 8], 81)
        assert involution_apply(x, involution_kernel(x, w)).shape == x.shape

    def test_reduction_ratio_must_divide_channels(self):
        with pytest.raises(ConfigurationError):
            InvolutionWeights(np.zeros((1, 5)), np.zeros((9, 1)), np.ones(1), np.zeros(1), r=2, k=3)

    def test_groups_must_divide_channels(self):
        x = prng_fill([3, 3, 3], 1)
        with pytest.raises(InvalidShapeError):
            involution_apply(x, np.zeros((3, 3, 3, 3, 2)))
