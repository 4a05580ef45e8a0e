"""Reference softmax and explicit-matrix Fastmax."""
import numpy as np
import pytest

from fastmax import oracle
from fastmax.core import normalize_qk, poly_kernel
from fastmax.errors import NumericalInstability
from fastmax.flops import FlopMeter
from fastmax.tensor import Rng

from conftest import qkv


def two_loop_softmax(q, k, v, masked):
    n, d = q.shape
    out = np.zeros_like(v)
    for i in range(n):
        last = i + 1 if masked else n
        s = [np.dot(q[i], k[j]) / np.sqrt(d) for j in range(last)]
        m = max(s)
        w = [np.exp(x - m) for x in s]
        z = sum(w)
        for j in range(last):
            out[i] += w[j] / z * v[j]
    return out


class TestSoftmax:
    def test_single_token(self, rng):
        q, k, v = qkv(rng, 1, 4)
        assert np.allclose(oracle.softmax_attention(q, k, v), v, rtol=0, atol=1e-15)

    def test_zero_query_is_column_mean(self, rng):
        _, k, v = qkv(rng, 6, 3)
        out = oracle.softmax_attention(np.zeros((6, 3)), k, v)
        assert np.allclose(out, v.mean(axis=0)[None, :], atol=1e-14)

    @pytest.mark.parametrize("masked", [False, True])
    def test_matches_two_loop(self, masked):
        q, k, v = qkv(Rng(11), 4, 2)
        assert np.allclose(oracle.softmax_attention(q, k, v, masked), two_loop_softmax(q, k, v, masked),
                           rtol=1e-12, atol=1e-12)

    def test_large_scores_stay_finite(self, rng):
        q, k, v = qkv(rng, 8, 4)
        assert np.all(np.isfinite(oracle.softmax_attention(q * 1e3, k * 1e3, v)))

    def test_flops_quadratic(self, rng):
        def total(n):
            with FlopMeter() as m:
                oracle.softmax_attention(*qkv(rng, n, 8))
            return m.total

        assert abs(total(512) / total(256) - 4.0) < 0.05

    def test_backward_zero_upstream(self, rng):
        q, k, v = qkv(rng, 5, 3)
        for g in oracle.softmax_backward(q, k, v, False, np.zeros((5, 3))):
            assert not g.any()

    @pytest.mark.parametrize("masked", [False, True])
    def test_backward_matches_finite_differences(self, masked):
        rng = Rng(5)
        q, k, v = qkv(rng, 6, 3)
        up = rng.normal((6, 3))
        grads = oracle.softmax_backward(q, k, v, masked, up)
        h = 1e-5
        for idx, x in enumerate((q, k, v)):
            fd = np.zeros_like(x)
            for pos in np.ndindex(x.shape):
                args = [q, k, v]
                xp, xm = x.copy(), x.copy()
                xp[pos] += h
                xm[pos] -= h
                args[idx] = xp
                lp = (up * oracle.softmax_attention(*args, masked)).sum()
                args[idx] = xm
                lm = (up * oracle.softmax_attention(*args, masked)).sum()
                fd[pos] = (lp - lm) / (2 * h)
            assert np.allclose(grads[idx], fd, rtol=1e-5, atol=1e-8)


class TestFastmaxNaive:
    def test_single_token(self, rng):
        q, k, v = qkv(rng, 1, 3)
        pair = normalize_qk(q, k)
        assert np.array_equal(oracle.fastmax_naive(pair.qh, pair.kh, v), v)

    def test_hand_example(self):
        qh = kh = np.array([[1.0], [-1.0]])
        v = np.array([[1.0], [0.0]])
        out = oracle.fastmax_naive(qh, kh, v, p=2)
        # g = f(1) + f(-1) = 2.5 + 0.5 = 3 for both rows
        assert np.allclose(out, [[2.5 / 3], [0.5 / 3]], rtol=1e-15)

    def test_linear_in_v(self, rng):
        q, k, v1 = qkv(rng, 7, 3)
        v2 = rng.normal((7, 3))
        pair = normalize_qk(q, k)
        lhs = oracle.fastmax_naive(pair.qh, pair.kh, v1 + v2)
        rhs = oracle.fastmax_naive(pair.qh, pair.kh, v1) + oracle.fastmax_naive(pair.qh, pair.kh, v2)
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_degree_one_zero_denominator(self):
        # s = -1 makes f(s) = 1 + s vanish
        qh = np.array([[1.0, 0.0]])
        kh = np.array([[-1.0, 0.0]])
        with pytest.raises(NumericalInstability) as err:
            oracle.fastmax_naive(qh, kh, np.ones((1, 2)), p=1)
        assert err.value.row == 0


class TestExplicitAttention:
    def test_identical_rows_uniform(self):
        x = np.tile(np.array([[0.3, -1.0, 2.0]]), (5, 1))
        pair = normalize_qk(x, x)
        a = oracle.explicit_attention(pair.qh, pair.kh)
        assert np.allclose(a, 1 / 5, rtol=1e-14)

    def test_masked_first_row(self, rng):
        q, k, _ = qkv(rng, 4, 3)
        pair = normalize_qk(q, k)
        a = oracle.explicit_attention(pair.qh, pair.kh, masked=True)
        assert a[0].tolist() == [1.0, 0.0, 0.0, 0.0]
        assert not np.triu(a, 1).any()

    def test_times_v_is_naive(self):
        q, k, v = qkv(Rng(3), 8, 4)
        pair = normalize_qk(q, k)
        a = oracle.explicit_attention(pair.qh, pair.kh, p=2)
        assert np.allclose(a @ v, oracle.fastmax_naive(pair.qh, pair.kh, v), rtol=1e-12, atol=1e-12)

    def test_cancellation_is_one_at_p2(self, rng):
        q, k, _ = qkv(rng, 9, 4)
        pair = normalize_qk(q, k)
        assert oracle.cancellation(pair.qh, pair.kh, 2) == pytest.approx(1.0, abs=1e-14)


class TestScoreDerivative:
    def test_single_token_zero(self, rng):
        q, k, v = qkv(rng, 1, 3)
        pair = normalize_qk(q, k)
        ds = oracle.score_derivative(pair.qh, pair.kh, v)
        assert ds.shape == (1, 3, 1) and not ds.any()

    def test_naive_backward_zero_upstream(self, rng):
        q, k, v = qkv(rng, 4, 3)
        pair = normalize_qk(q, k)
        for g in oracle.fastmax_backward_naive(pair.qh, pair.kh, v, 2, False, np.zeros((4, 3))):
            assert not g.any()

    @pytest.mark.parametrize("p", [1, 2])
    def test_naive_backward_matches_fd(self, p):
        rng = Rng(5)
        q, k, v = qkv(rng, 6, 3)
        pair = normalize_qk(q, k)
        qh, kh = pair.qh, pair.kh
        up = rng.normal((6, 3))
        grads = oracle.fastmax_backward_naive(qh, kh, v, p, False, up)
        h = 1e-5
        for idx, x in enumerate((qh, kh, v)):
            fd = np.zeros_like(x)
            for pos in np.ndindex(x.shape):
                args = [qh, kh, v]
                xp, xm = x.copy(), x.copy()
                xp[pos] += h
                xm[pos] -= h
                args[idx] = xp
                lp = (up * oracle.fastmax_naive(*args, p)).sum()
                args[idx] = xm
                lm = (up * oracle.fastmax_naive(*args, p)).sum()
                fd[pos] = (lp - lm) / (2 * h)
            assert np.allclose(grads[idx], fd, rtol=1e-5, atol=1e-7)

    def test_poly_kernel_values(self):
        assert poly_kernel(0.0, 1) == 1.0 and poly_kernel(0.0, 2) == 1.0
        assert poly_kernel(1.0, 2) == 2.5
        assert poly_kernel(-1.0, 1) == 0.0 and poly_kernel(-1.0, 2) == 0.5
