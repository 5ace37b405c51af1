"""Attention ops: hand-worked vectors, algebraic identities, oracles,
structural graph claims, and exact flop accounting."""

import numpy as np
import pytest

from reduceformer import (Graph, LocalContextConfig, LocalContextWeights,
                          QkvBundle, Rng, ShapeError, Tensor,
                          attention_reductions, closed_form_oracle,
                          flop_count_attention, multi_scale_local_context,
                          ops, random_bundle, record_attention_graph,
                          reduce_former_attention, relu_linear_attention,
                          scan_graph_kinds)

from oracles import loop_relu_linear_attention


def _bundle(q, k, v, shape):
    return QkvBundle(q=Tensor.from_values(shape, q),
                     k=Tensor.from_values(shape, k),
                     v=Tensor.from_values(shape, v))


def _int_bundle(d, h, w, seed, lo=-3, hi=4):
    """Integer-valued bundle: sums are exact in float, so permutation
    identities hold bitwise."""
    rng = Rng(seed)
    def draw():
        return Tensor((rng.uniform((1, d, h, w), lo, hi)).astype(np.int64)
                      .astype(np.float32))
    return QkvBundle(q=draw(), k=draw(), v=draw())


class TestHandWorkedVectors:
    def test_single_channel_two_positions(self):
        b = _bundle([1, 2], [1, -1], [2, 3], (1, 1, 1, 2))
        out = reduce_former_attention(b, eps=0.0)
        np.testing.assert_array_equal(out.data.ravel(), [5.0, 5.0])
        red = attention_reductions(b, eps=0.0)
        assert red.sum_k.data.ravel()[0] == 1.0
        assert red.sum_v.data.ravel()[0] == 5.0
        assert red.sum_kv.data.ravel()[0] == 5.0
        np.testing.assert_array_equal(red.sum_qk.data.ravel(), [1.0, 2.0])

    def test_two_channels_two_positions(self):
        b = _bundle([1, 0, 0, 1], [1, 1, 2, 0], [1, 2, 3, 1], (1, 2, 1, 2))
        out = reduce_former_attention(b, eps=0.0)
        np.testing.assert_array_equal(out.data.reshape(2, 2), [[6.0, 0.0], [0.0, 8.0]])
        red = attention_reductions(b, eps=0.0)
        np.testing.assert_array_equal(red.sum_kv.data.ravel(), [12.0, 16.0])
        np.testing.assert_array_equal(red.sum_qk.data.ravel(), [2.0, 2.0])

    def test_closed_form_matches_hand_vectors(self):
        b1 = _bundle([1, 2], [1, -1], [2, 3], (1, 1, 1, 2))
        np.testing.assert_array_equal(closed_form_oracle(b1, 0.0).data.ravel(), [5.0, 5.0])
        b2 = _bundle([1, 0, 0, 1], [1, 1, 2, 0], [1, 2, 3, 1], (1, 2, 1, 2))
        np.testing.assert_array_equal(closed_form_oracle(b2, 0.0).data.reshape(2, 2),
                                      [[6.0, 0.0], [0.0, 8.0]])

    def test_nonpositive_keys_zero_output(self):
        rng = Rng(1)
        b = QkvBundle(q=rng.tensor((1, 2, 2, 2)),
                      k=Tensor(-np.abs(rng.uniform((1, 2, 2, 2), 0, 1))),
                      v=rng.tensor((1, 2, 2, 2)))
        out = reduce_former_attention(b, eps=1e-6)
        np.testing.assert_array_equal(out.data, np.zeros((1, 2, 2, 2), np.float32))

    def test_baseline_hand_vector(self):
        b = _bundle([1, 2], [1, -1], [2, 3], (1, 1, 1, 2))
        out = relu_linear_attention(b, eps=0.0)
        np.testing.assert_array_equal(out.data.ravel(), [2.0, 2.0])

    def test_baseline_query_cancels_at_d1(self):
        # with one channel the positive query scalar cancels out entirely
        rng = Rng(2)
        k = rng.tensor((1, 1, 2, 2))
        v = rng.tensor((1, 1, 2, 2))
        q1 = Tensor(rng.uniform((1, 1, 2, 2), 0.1, 1.0))
        q2 = Tensor(rng.uniform((1, 1, 2, 2), 1.0, 9.0))
        o1 = relu_linear_attention(QkvBundle(q=q1, k=k, v=v), eps=0.0)
        o2 = relu_linear_attention(QkvBundle(q=q2, k=k, v=v), eps=0.0)
        np.testing.assert_allclose(o1.data, o2.data, rtol=1e-6)


class TestClosedFormIdentity:
    @pytest.mark.parametrize("d,n", [(1, 4), (8, 49), (32, 196)])
    def test_pipeline_equals_closed_form(self, d, n):
        for seed in range(10):
            b = random_bundle(d, n, seed=seed, dtype=np.float64)
            got = reduce_former_attention(b, eps=1e-6).data
            want = closed_form_oracle(b, eps=1e-6).data
            np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-12)


class TestBaselineOracle:
    def test_matches_triple_loop(self):
        rng = Rng(3)
        for trial in range(10):
            d, n = [(1, 4), (2, 9), (4, 16), (8, 4), (3, 25)][trial % 5]
            b = random_bundle(d, n, seed=100 + trial, dtype=np.float64)
            got = relu_linear_attention(b, eps=1e-6).data
            want = loop_relu_linear_attention(b.q.data, b.k.data, b.v.data, 1e-6)
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-12)


def _eps0_bundle(d, n, seed):
    """Bundle safe for exact eps=0 identities: queries strictly positive so
    the per-position normalizer never vanishes."""
    b = random_bundle(d, n, seed=seed, dtype=np.float64)
    rng = Rng(seed + 500)
    return QkvBundle(q=Tensor(rng.uniform(b.q.shape, 0.1, 1.0, np.float64)),
                     k=b.k, v=b.v)


class TestHomogeneity:
    """Exact scaling laws at eps=0: degree 1 in V and K, degree 0 in Q."""

    @pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0])
    def test_value_scaling(self, alpha):
        b = _eps0_bundle(4, 9, seed=5)
        base = reduce_former_attention(b, eps=0.0).data
        scaled = QkvBundle(q=b.q, k=b.k, v=Tensor(b.v.data * alpha))
        np.testing.assert_allclose(reduce_former_attention(scaled, eps=0.0).data,
                                   alpha * base, rtol=1e-6)

    @pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0])
    def test_key_scaling(self, alpha):
        b = _eps0_bundle(4, 9, seed=6)
        base = reduce_former_attention(b, eps=0.0).data
        scaled = QkvBundle(q=b.q, k=Tensor(b.k.data * alpha), v=b.v)
        np.testing.assert_allclose(reduce_former_attention(scaled, eps=0.0).data,
                                   alpha * base, rtol=1e-6)

    @pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0])
    def test_query_scaling_is_invariant(self, alpha):
        b = _eps0_bundle(4, 9, seed=7)
        base = reduce_former_attention(b, eps=0.0).data
        scaled = QkvBundle(q=Tensor(b.q.data * alpha), k=b.k, v=b.v)
        np.testing.assert_allclose(reduce_former_attention(scaled, eps=0.0).data,
                                   base, rtol=1e-6)


class TestPermutations:
    def _permute_spatial(self, t: Tensor, perm: np.ndarray) -> Tensor:
        b, c, h, w = t.shape
        flat = t.data.reshape(b, c, h * w)[:, :, perm]
        return Tensor(flat.reshape(b, c, h, w))

    def test_joint_kv_permutation_invariance(self):
        b = _int_bundle(3, 2, 3, seed=8)
        perm = np.array([3, 0, 5, 2, 4, 1])
        permuted = QkvBundle(q=b.q, k=self._permute_spatial(b.k, perm),
                             v=self._permute_spatial(b.v, perm))
        base = reduce_former_attention(b, eps=1e-6).data
        got = reduce_former_attention(permuted, eps=1e-6).data
        np.testing.assert_array_equal(got, base)

    def test_query_permutation_equivariance(self):
        b = _int_bundle(3, 2, 3, seed=9)
        perm = np.array([5, 3, 1, 0, 4, 2])
        permuted = QkvBundle(q=self._permute_spatial(b.q, perm), k=b.k, v=b.v)
        base = reduce_former_attention(b, eps=1e-6)
        got = reduce_former_attention(permuted, eps=1e-6).data
        np.testing.assert_array_equal(got, self._permute_spatial(base, perm).data)


class TestShapesAndErrors:
    @pytest.mark.parametrize("d,h,w,batch", [(1, 1, 1, 1), (4, 3, 5, 2), (16, 7, 7, 1)])
    def test_output_shape_equals_query_shape(self, d, h, w, batch):
        rng = Rng(10)
        b = QkvBundle(q=rng.tensor((batch, d, h, w)), k=rng.tensor((batch, d, h, w)),
                      v=rng.tensor((batch, d, h, w)))
        assert reduce_former_attention(b).shape == (batch, d, h, w)
        assert relu_linear_attention(b).shape == (batch, d, h, w)

    def test_bundle_shape_mismatch_rejected(self):
        rng = Rng(11)
        with pytest.raises(ShapeError):
            QkvBundle(q=rng.tensor((1, 2, 2, 2)), k=rng.tensor((1, 2, 2, 2)),
                      v=rng.tensor((1, 3, 2, 2)))

    def test_negative_eps_rejected(self):
        b = random_bundle(2, 4, seed=12)
        with pytest.raises(ValueError):
            reduce_former_attention(b, eps=-1e-3)
        with pytest.raises(ValueError):
            relu_linear_attention(b, eps=-1e-3)
        with pytest.raises(ValueError):
            closed_form_oracle(b, eps=-1e-3)

    def test_reduction_set_invariants(self):
        b = random_bundle(4, 16, seed=13)
        red = attention_reductions(b, eps=1e-6)
        assert (red.sum_k.data >= 0).all()
        assert (red.sum_qk.data + red.eps > 0).all()
        assert red.sum_k.shape == (1, 4, 1, 1)
        assert red.sum_qk.shape == (1, 1, 4, 4)


class TestMultiScaleLocalContext:
    def test_single_scale_equals_plain_split(self):
        cfg = LocalContextConfig(base_channels=3, scales=1, dw_kernels=())
        rng = Rng(14)
        x = rng.tensor((2, 3, 5, 5))
        w = LocalContextWeights.init(cfg, Rng(15))
        bundle = multi_scale_local_context(x, cfg, w)
        direct = ops.conv2d(x, w.point).data
        np.testing.assert_array_equal(bundle.q.data, direct[:, 0:3])
        np.testing.assert_array_equal(bundle.k.data, direct[:, 3:6])
        np.testing.assert_array_equal(bundle.v.data, direct[:, 6:9])

    def test_two_scale_shapes(self):
        cfg = LocalContextConfig(base_channels=8, scales=2, dw_kernels=(5,))
        x = Rng(16).tensor((2, 8, 16, 16))
        bundle = multi_scale_local_context(x, cfg, LocalContextWeights.init(cfg, Rng(17)))
        assert bundle.q.shape == (2, 16, 16, 16)
        assert bundle.k.shape == (2, 16, 16, 16)
        assert bundle.v.shape == (2, 16, 16, 16)

    def test_three_scale_channel_budget(self):
        cfg = LocalContextConfig(base_channels=4, scales=3, dw_kernels=(3, 5))
        assert cfg.qkv_channels == 36
        x = Rng(18).tensor((1, 4, 8, 8))
        bundle = multi_scale_local_context(x, cfg, LocalContextWeights.init(cfg, Rng(19)))
        assert bundle.q.shape[1] + bundle.k.shape[1] + bundle.v.shape[1] == 36

    def test_scale_major_channel_order(self):
        # role blocks are gathered across scales: q = [q_scale0 | q_scale1]
        cfg = LocalContextConfig(base_channels=2, scales=2, dw_kernels=(3,))
        rng = Rng(20)
        x = rng.tensor((1, 2, 4, 4))
        w = LocalContextWeights.init(cfg, Rng(21))
        bundle = multi_scale_local_context(x, cfg, w)
        y = ops.conv2d(x, w.point).data
        dw = ops.conv2d(Tensor(y), w.dw[0], stride=1, padding=1, groups=6).data
        np.testing.assert_array_equal(bundle.q.data, np.concatenate(
            [y[:, 0:2], dw[:, 0:2]], axis=1))
        np.testing.assert_array_equal(bundle.v.data, np.concatenate(
            [y[:, 4:6], dw[:, 4:6]], axis=1))

    def test_channel_mismatch_rejected(self):
        cfg = LocalContextConfig(base_channels=4, scales=1, dw_kernels=())
        with pytest.raises(ShapeError):
            multi_scale_local_context(Rng(22).tensor((1, 3, 4, 4)), cfg,
                                      LocalContextWeights.init(cfg, Rng(23)))

    def test_kernel_list_validation(self):
        with pytest.raises(ValueError):
            LocalContextConfig(base_channels=4, scales=2, dw_kernels=())
        with pytest.raises(ValueError):
            LocalContextConfig(base_channels=4, scales=2, dw_kernels=(4,))


class TestStructuralClaims:
    def test_reduction_graph_is_matmul_and_exp_free(self):
        g = record_attention_graph("reduceformer", d=8, N=16)
        scan = scan_graph_kinds(g)
        assert scan["matmul_nodes"] == 0
        assert scan["exp_nodes"] == 0
        allowed = {"leaf", "relu", "ew_mul", "ew_div", "add_scalar",
                   "global_sum_spatial", "channel_sum"}
        assert set(scan["kinds"]) <= allowed

    def test_baseline_graph_contains_matmul(self):
        g = record_attention_graph("relu_linear", d=8, N=16)
        assert scan_graph_kinds(g)["matmul_nodes"] >= 1


class TestFlopAccounting:
    @pytest.mark.parametrize("kind,b,d,n", [
        ("reduceformer", 1, 16, 49), ("reduceformer", 2, 8, 16),
        ("relu_linear", 1, 16, 49), ("relu_linear", 3, 4, 25),
    ])
    def test_instrumented_matches_analytic(self, kind, b, d, n):
        bundle = random_bundle(d, n, b, seed=24)
        rep = flop_count_attention(kind, b, d, n)
        with ops.flop_tally() as tally:
            if kind == "reduceformer":
                reduce_former_attention(bundle)
            else:
                relu_linear_attention(bundle)
        assert tally.ew_flops == rep.ew_flops
        assert tally.macs == rep.macs

    def test_token_count_linearity(self):
        # the n-dependent part doubles exactly when n doubles
        b, d = 1, 32
        f1 = flop_count_attention("reduceformer", b, d, 100)
        f2 = flop_count_attention("reduceformer", b, d, 200)
        fixed = 3 * b * d  # the only n-independent term
        assert f2.ew_flops + fixed == 2 * (f1.ew_flops + fixed)

    def test_baseline_quadratic_in_width(self):
        n = 49
        lo = flop_count_attention("relu_linear", 1, 32, n)
        hi = flop_count_attention("relu_linear", 1, 64, n)
        assert hi.macs / lo.macs == pytest.approx(4.0, rel=0.05)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            flop_count_attention("softmax", 1, 8, 16)
