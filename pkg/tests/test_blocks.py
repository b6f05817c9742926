import numpy as np
import pytest

from cteg.blocks import (AttentionWeights, FFNWeights, causal_mask, ffn,
                         multi_head_attention, sinusoidal_pe)
from cteg.rng import RngStream
from cteg.tensor import Tensor, ContractError, grad_check, mse, tsum


def make_attn(d=16, heads=2, seed=0):
    return AttentionWeights(RngStream(seed), d, heads)


class TestCausalMask:
    def test_inclusive(self):
        m = causal_mask(3, include_self=True)
        expected = [[1, 0, 0], [1, 1, 0], [1, 1, 1]]
        np.testing.assert_array_equal(m, np.array(expected, dtype=bool))

    def test_strict_with_sentinel_slot(self):
        m = causal_mask(3, include_self=False)
        expected = [[1, 0, 0], [1, 0, 0], [1, 1, 0]]
        np.testing.assert_array_equal(m, np.array(expected, dtype=bool))

    def test_t1(self):
        np.testing.assert_array_equal(causal_mask(1), [[True]])

    def test_t0_rejected(self):
        with pytest.raises(ContractError):
            causal_mask(0)


class TestAttention:
    def test_single_key_ignores_query(self):
        # with one key/value the softmax is 1, so the output is independent
        # of the query content
        w = make_attn()
        rng = RngStream(1)
        kv = Tensor(rng.normal((1, 16)))
        q1 = Tensor(rng.normal((3, 16)))
        q2 = Tensor(rng.normal((3, 16)))
        out1 = multi_head_attention(q1, kv, kv, None, w).data
        out2 = multi_head_attention(q2, kv, kv, None, w).data
        np.testing.assert_allclose(out1, out2, atol=1e-12)
        np.testing.assert_allclose(out1[0], out1[2], atol=1e-12)

    def test_causality_exact(self):
        w = make_attn(seed=2)
        rng = RngStream(3)
        x = rng.normal((3, 16))
        mask = causal_mask(3)
        base = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), mask, w).data
        x2 = x.copy()
        x2[2] += 10.0  # perturb the last key/value/query
        pert = multi_head_attention(Tensor(x2), Tensor(x2), Tensor(x2), mask, w).data
        np.testing.assert_array_equal(base[0], pert[0])
        np.testing.assert_array_equal(base[1], pert[1])
        assert not np.allclose(base[2], pert[2])

    def test_orthogonal_query_uniform_average(self):
        # identity projections, one head: a query orthogonal to every key
        # gives uniform softmax, so the output row is the mean of values
        w = AttentionWeights(RngStream(4), 4, 1)
        for lin in (w.wq, w.wk, w.wv, w.wo):
            lin.w.data[...] = np.eye(4)
            lin.b.data[...] = 0.0
        keys = np.array([[1., 0., 0., 0.], [0., 1., 0., 0.]])
        vals = RngStream(5).normal((2, 4))
        q = np.array([[0., 0., 0., 1.]])
        out = multi_head_attention(Tensor(q), Tensor(keys), Tensor(vals), None, w)
        np.testing.assert_allclose(out.data[0], vals.mean(axis=0), atol=1e-12)

    def test_fully_masked_row_rejected(self):
        w = make_attn()
        x = Tensor(RngStream(6).normal((2, 16)))
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(ContractError, match="no visible keys"):
            multi_head_attention(x, x, x, mask, w)

    def test_rows_are_convex_combinations(self):
        # pre-output-projection attention output lies in the convex hull of
        # the value rows; verify via constant values
        w = make_attn(seed=7)
        const = np.tile(RngStream(8).normal((1, 16)), (4, 1))
        q = Tensor(RngStream(9).normal((5, 16)))
        out = multi_head_attention(q, Tensor(const), Tensor(const),
                                   None, w).data
        want = multi_head_attention(q, Tensor(const[:1]), Tensor(const[:1]),
                                    None, w).data
        np.testing.assert_allclose(out, want, atol=1e-10)

    def test_grad(self):
        w = make_attn(d=8, heads=2, seed=10)
        rng = RngStream(11)
        q = Tensor(rng.normal((3, 8)), requires_grad=True)
        kv = Tensor(rng.normal((4, 8)), requires_grad=True)
        tgt = Tensor(rng.normal((3, 8)))
        params = [q, kv] + list(w.parameters().values())
        err = grad_check(lambda: mse(multi_head_attention(q, kv, kv, None, w), tgt),
                         params, max_entries_per_param=8)
        assert err < 1e-6

    def test_head_count_must_divide(self):
        with pytest.raises(ContractError, match="divisible"):
            AttentionWeights(RngStream(0), 16, 3)


class TestSinusoidalPe:
    def test_position_zero(self):
        pe = sinusoidal_pe(4, 8)
        np.testing.assert_array_equal(pe[0, 0::2], 0.0)  # sin 0
        np.testing.assert_array_equal(pe[0, 1::2], 1.0)  # cos 0

    def test_hand_value(self):
        pe = sinusoidal_pe(2, 6)
        assert abs(pe[1, 0] - np.sin(1.0)) < 1e-12  # ~0.841471

    def test_rows_distinct(self):
        pe = sinusoidal_pe(50, 16)
        for t in range(1, 50):
            assert not np.allclose(pe[0], pe[t])

    def test_deterministic(self):
        np.testing.assert_array_equal(sinusoidal_pe(7, 12), sinusoidal_pe(7, 12))

    def test_odd_d_rejected(self):
        with pytest.raises(ContractError, match="even"):
            sinusoidal_pe(4, 7)


class TestFfn:
    def test_zero_weights_zero_output(self):
        w = FFNWeights(RngStream(12), 8, 16)
        for lin in (w.lin1, w.lin2):
            lin.w.data[...] = 0.0
            lin.b.data[...] = 0.0
        out = ffn(Tensor(RngStream(13).normal((3, 8))), w)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_position_wise(self):
        w = FFNWeights(RngStream(14), 8, 16)
        x = RngStream(15).normal((5, 8))
        perm = RngStream(16).permutation(5)
        out = ffn(Tensor(x), w).data
        out_perm = ffn(Tensor(x[perm]), w).data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-14)

    def test_grad(self):
        w = FFNWeights(RngStream(17), 6, 12)
        x = Tensor(RngStream(18).normal((3, 6)), requires_grad=True)
        tgt = Tensor(RngStream(19).normal((3, 6)))
        params = [x] + list(w.parameters().values())
        err = grad_check(lambda: mse(ffn(x, w), tgt), params,
                         max_entries_per_param=10)
        assert err < 1e-6
