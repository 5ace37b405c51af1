"""Tensor primitives against naive loop oracles, plus contract errors."""

import numpy as np
import pytest

from reduceformer import Rng, ShapeError, Tensor, ops

from oracles import (loop_channel_sum, loop_conv2d, loop_global_sum_spatial,
                     loop_mul_broadcast, loop_relu, splitmix64_ref)

N_TRIALS = 100


def _rand(rng, shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(shape, low, high))


class TestRelu:
    def test_basic(self):
        x = Tensor.from_values((1, 1, 1, 3), [-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(ops.relu(x).data.ravel(), [0.0, 0.0, 2.0])

    def test_zero_is_fixed_point(self):
        z = Tensor.zeros((2, 3, 4, 5))
        np.testing.assert_array_equal(ops.relu(z).data, z.data)

    def test_complementarity_property(self):
        # out * (out - x) == 0 elementwise: out is either 0 or x
        rng = Rng(11)
        for _ in range(N_TRIALS):
            x = _rand(rng, (1, 2, 3, 3))
            out = ops.relu(x).data
            np.testing.assert_array_equal(out * (out - x.data), np.zeros_like(out))

    def test_matches_loop_oracle(self):
        rng = Rng(12)
        for _ in range(N_TRIALS):
            x = _rand(rng, (1, 2, 3, 4))
            np.testing.assert_allclose(ops.relu(x).data, loop_relu(x.data),
                                       rtol=1e-6, atol=1e-6)


class TestEwMulBroadcast:
    def test_scalar_broadcast(self):
        a = Tensor.from_values((1, 1, 1, 2), [2.0, 3.0])
        b = Tensor.from_values((1, 1, 1, 1), [5.0])
        np.testing.assert_array_equal(ops.ew_mul_broadcast(a, b).data.ravel(), [10.0, 15.0])

    def test_equal_shapes(self):
        a = Tensor.from_values((1, 1, 1, 2), [1.0, 2.0])
        b = Tensor.from_values((1, 1, 1, 2), [3.0, 4.0])
        np.testing.assert_array_equal(ops.ew_mul_broadcast(a, b).data.ravel(), [3.0, 8.0])

    def test_per_channel_scaling(self):
        rng = Rng(13)
        a = _rand(rng, (1, 2, 2, 2))
        alpha, beta = 2.5, -0.5
        b = Tensor.from_values((1, 2, 1, 1), [alpha, beta])
        out = ops.ew_mul_broadcast(a, b).data
        np.testing.assert_allclose(out[0, 0], a.data[0, 0] * alpha, rtol=1e-6)
        np.testing.assert_allclose(out[0, 1], a.data[0, 1] * beta, rtol=1e-6)

    def test_matches_loop_oracle(self):
        rng = Rng(14)
        for t in range(N_TRIALS):
            a = _rand(rng, (2, 3, 2, 2))
            b = _rand(rng, (2, 3, 1, 1) if t % 2 else (2, 3, 2, 2))
            np.testing.assert_allclose(ops.ew_mul_broadcast(a, b).data,
                                       loop_mul_broadcast(a.data, b.data),
                                       rtol=1e-6, atol=1e-6)

    @pytest.mark.parametrize("bad_shape", [(1, 3, 1, 1), (2, 2, 1, 1), (1, 2, 2, 1),
                                           (1, 1, 2, 2), (1, 2, 1, 2)])
    def test_rejects_other_broadcasts(self, bad_shape):
        a = Tensor.zeros((1, 2, 2, 2))
        with pytest.raises(ShapeError):
            ops.ew_mul_broadcast(a, Tensor.zeros(bad_shape))


class TestEwDivBroadcast:
    def test_equal_shapes(self):
        a = Tensor.from_values((1, 1, 1, 2), [6.0, 9.0])
        b = Tensor.from_values((1, 1, 1, 2), [2.0, 3.0])
        np.testing.assert_array_equal(ops.ew_div_broadcast(a, b).data.ravel(), [3.0, 3.0])

    def test_channel_broadcast(self):
        a = Tensor.from_values((1, 2, 1, 2), [2.0, 4.0, 6.0, 8.0])
        b = Tensor.from_values((1, 1, 1, 2), [2.0, 4.0])
        np.testing.assert_array_equal(ops.ew_div_broadcast(a, b).data.ravel(),
                                      [1.0, 1.0, 3.0, 2.0])

    def test_rejects_channel_vector(self):
        a = Tensor.zeros((1, 2, 2, 2))
        with pytest.raises(ShapeError):
            ops.ew_div_broadcast(a, Tensor.full((1, 2, 1, 1), 1.0))


class TestGlobalSumSpatial:
    def test_basic(self):
        x = Tensor.from_values((1, 1, 2, 2), [1.0, 2.0, 3.0, 4.0])
        out = ops.global_sum_spatial(x)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.ravel()[0] == 10.0

    def test_zero(self):
        out = ops.global_sum_spatial(Tensor.zeros((2, 3, 4, 4)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 3, 1, 1)))

    def test_matches_loop_oracle(self):
        rng = Rng(15)
        for _ in range(N_TRIALS):
            x = _rand(rng, (1, 3, 4, 4))
            np.testing.assert_allclose(ops.global_sum_spatial(x).data,
                                       loop_global_sum_spatial(x.data),
                                       rtol=1e-6, atol=1e-6)


class TestChannelSum:
    def test_basic(self):
        x = Tensor.from_values((1, 2, 1, 1), [3.0, 4.0])
        out = ops.channel_sum(x)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.ravel()[0] == 7.0

    def test_single_channel_identity(self):
        rng = Rng(16)
        x = _rand(rng, (2, 1, 3, 3))
        np.testing.assert_array_equal(ops.channel_sum(x).data, x.data)

    def test_matches_loop_oracle(self):
        rng = Rng(17)
        for _ in range(N_TRIALS):
            x = _rand(rng, (1, 4, 2, 2))
            np.testing.assert_allclose(ops.channel_sum(x).data,
                                       loop_channel_sum(x.data),
                                       rtol=1e-6, atol=1e-6)


class TestConv2d:
    def test_identity_pointwise(self):
        rng = Rng(18)
        x = _rand(rng, (1, 3, 4, 4))
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = ops.conv2d(x, w, bias=np.zeros(3, dtype=np.float32))
        np.testing.assert_array_equal(out.data, x.data)

    def test_depthwise_ones_tap_counts(self):
        v = 1.5
        x = Tensor.full((1, 2, 4, 4), v)
        w = np.ones((2, 1, 3, 3), dtype=np.float32)
        out = ops.conv2d(x, w, stride=1, padding=1, groups=2).data
        assert out[0, 0, 0, 0] == pytest.approx(4 * v)   # corner: 4 taps
        assert out[0, 0, 0, 1] == pytest.approx(6 * v)   # edge: 6 taps
        assert out[0, 1, 1, 2] == pytest.approx(9 * v)   # interior: 9 taps

    def test_pointwise_matches_loop_oracle(self):
        rng = Rng(19)
        x = _rand(rng, (1, 2, 4, 4))
        w = rng.uniform((3, 2, 1, 1), -1, 1)
        np.testing.assert_allclose(ops.conv2d(x, w).data, loop_conv2d(x.data, w),
                                   rtol=1e-6, atol=1e-6)

    def test_matches_loop_oracle_across_configs(self):
        rng = Rng(20)
        cases = [
            dict(cin=2, cout=3, k=3, stride=1, padding=1, groups=1),
            dict(cin=2, cout=3, k=3, stride=2, padding=0, groups=1),
            dict(cin=4, cout=4, k=3, stride=1, padding=1, groups=4),
            dict(cin=4, cout=4, k=5, stride=2, padding=2, groups=4),
            dict(cin=4, cout=6, k=1, stride=1, padding=0, groups=2),
        ]
        trials_per_case = N_TRIALS // len(cases)
        for case in cases:
            for _ in range(trials_per_case):
                x = _rand(rng, (2, case["cin"], 5, 5))
                w = rng.uniform((case["cout"], case["cin"] // case["groups"],
                                 case["k"], case["k"]), -1, 1)
                b = rng.uniform((case["cout"],), -1, 1)
                got = ops.conv2d(x, w, bias=b, stride=case["stride"],
                                 padding=case["padding"], groups=case["groups"])
                want = loop_conv2d(x.data, w, bias=b, stride=case["stride"],
                                   padding=case["padding"], groups=case["groups"])
                np.testing.assert_allclose(got.data, want, rtol=1e-5, atol=1e-5)

    def test_error_cases(self):
        x = Tensor.zeros((1, 4, 4, 4))
        with pytest.raises(ShapeError):   # even kernel
            ops.conv2d(x, np.zeros((4, 4, 2, 2), dtype=np.float32))
        with pytest.raises(ShapeError):   # groups does not divide channels
            ops.conv2d(x, np.zeros((4, 1, 3, 3), dtype=np.float32), groups=3)
        with pytest.raises(ShapeError):   # channel/group mismatch in weight
            ops.conv2d(x, np.zeros((4, 3, 3, 3), dtype=np.float32), groups=1)
        with pytest.raises(ShapeError):   # output collapses below 1
            ops.conv2d(Tensor.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5), dtype=np.float32))
        with pytest.raises(ValueError):
            ops.conv2d(x, np.zeros((4, 4, 3, 3), dtype=np.float32), stride=0)


class TestConcatSplit:
    def test_concat_shapes(self):
        a = Tensor.zeros((1, 2, 3, 3))
        b = Tensor.zeros((1, 3, 3, 3))
        assert ops.concat_channels([a, b]).shape == (1, 5, 3, 3)

    def test_split_shapes(self):
        x = Tensor.zeros((1, 6, 2, 2))
        parts = ops.split_channels(x, [2, 2, 2])
        assert [p.shape for p in parts] == [(1, 2, 2, 2)] * 3

    def test_split_of_concat_is_identity(self):
        rng = Rng(21)
        for _ in range(N_TRIALS):
            parts = [_rand(rng, (1, c, 2, 3)) for c in (1, 2, 3)]
            back = ops.split_channels(ops.concat_channels(parts), [1, 2, 3])
            for orig, rec in zip(parts, back):
                np.testing.assert_array_equal(orig.data, rec.data)

    def test_concat_of_split_is_identity(self):
        rng = Rng(22)
        for _ in range(N_TRIALS):
            x = _rand(rng, (2, 6, 2, 2))
            rec = ops.concat_channels(ops.split_channels(x, [1, 2, 3]))
            np.testing.assert_array_equal(x.data, rec.data)

    def test_errors(self):
        with pytest.raises(ShapeError):
            ops.concat_channels([Tensor.zeros((1, 2, 3, 3)), Tensor.zeros((1, 2, 4, 4))])
        with pytest.raises(ShapeError):
            ops.split_channels(Tensor.zeros((1, 6, 2, 2)), [2, 2])
        with pytest.raises(ShapeError):
            ops.concat_channels([])


class TestTensor:
    def test_rejects_non_rank4(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3)))

    def test_rejects_empty_dims(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 0, 2, 2)))

    def test_int_input_coerced_to_float32(self):
        t = Tensor(np.arange(4).reshape(1, 1, 2, 2))
        assert t.dtype == np.float32


class TestRng:
    def test_matches_splitmix64_reference(self):
        for seed in (0, 1, 0xDEADBEEF, (1 << 64) - 2):
            got = [int(v) for v in Rng(seed).raw(8)]
            assert got == splitmix64_ref(seed, 8)

    def test_stream_continues_across_calls(self):
        r1 = Rng(42)
        a = list(r1.raw(3)) + list(r1.raw(5))
        b = list(Rng(42).raw(8))
        assert [int(v) for v in a] == [int(v) for v in b]

    def test_same_seed_same_tensors(self):
        t1 = Rng(7).tensor((2, 3, 4, 5))
        t2 = Rng(7).tensor((2, 3, 4, 5))
        np.testing.assert_array_equal(t1.data, t2.data)

    def test_different_seed_differs(self):
        assert not np.array_equal(Rng(7).tensor((2, 3, 4, 5)).data,
                                  Rng(8).tensor((2, 3, 4, 5)).data)

    def test_uniform_range(self):
        u = Rng(9).uniform((1000,), -0.25, 0.75)
        assert u.min() >= -0.25 and u.max() < 0.75


class TestDeterminismAndThreads:
    def test_forward_chain_repeatable(self):
        def run():
            rng = Rng(33)
            x = _rand(rng, (1, 4, 6, 6))
            w = rng.uniform((8, 4, 3, 3), -1, 1)
            y = ops.conv2d(x, w, padding=1)
            return ops.ew_div_broadcast(
                ops.relu(y), ops.add_scalar(ops.channel_sum(y), 10.0)).data

        np.testing.assert_array_equal(run(), run())

    @pytest.mark.parametrize("groups,cout", [(1, 8), (8, 8)])
    def test_thread_count_does_not_change_bits(self, groups, cout):
        rng = Rng(34)
        x = _rand(rng, (2, 8, 6, 6))
        w = rng.uniform((cout, 8 // groups, 3, 3), -1, 1)
        single = ops.conv2d(x, w, padding=1, groups=groups).data
        ops.set_num_threads(4)
        try:
            multi = ops.conv2d(x, w, padding=1, groups=groups).data
        finally:
            ops.set_num_threads(1)
        np.testing.assert_array_equal(single, multi)
