"""Brute-force O(N^2 D) attention: the ground truth for the factorized path.

Nothing here touches the factorized machinery; the only shared piece is the
scalar kernel :func:`fastmax.core.poly_kernel`.
"""
import math

import numpy as np

from . import flops
from .core import poly_kernel, poly_kernel_grad
from .errors import NumericalInstability
from .tensor import as_matrix, check_same_shape

_DENOM_FLOOR = 1e-12


def _causal_mask(n):
    return np.tril(np.ones((n, n), dtype=bool))


def softmax_attention(q, k, v, masked=False):
    """Vanilla scaled dot-product attention with an optional causal mask.

    Scores are shifted by their row maximum before exponentiation.
    """
    q, k, v = (as_matrix(a, name) for a, name in ((q, "q"), (k, "k"), (v, "v")))
    check_same_shape(q=q, k=k, v=v)
    n, d = q.shape
    scores = (q @ k.T) * (1.0 / math.sqrt(d))
    if masked:
        scores[~_causal_mask(n)] = -np.inf
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    denom = scores.sum(axis=1, keepdims=True)
    out = scores @ v
    out /= denom
    # scores, scale, max shift, row sum, A @ V, final division
    nn = n * n
    flops.count(mults=nn * d + nn + nn * d + n * d, adds=nn * d + nn + nn + nn * d)
    return out


def softmax_backward(q, k, v, masked, upstream):
    """Gradients of ``sum(upstream * softmax_attention(q, k, v))``."""
    q, k, v, upstream = (as_matrix(a) for a in (q, k, v, upstream))
    n, d = q.shape
    scale = 1.0 / math.sqrt(d)
    s = (q @ k.T) * scale
    if masked:
        s[~_causal_mask(n)] = -np.inf
    s -= s.max(axis=1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=1, keepdims=True)
    dv = a.T @ upstream
    da = upstream @ v.T
    ds = a * (da - (da * a).sum(axis=1, keepdims=True))
    return ds @ k * scale, ds.T @ q * scale, dv


def fastmax_naive(qh, kh, v, p=2, masked=False):
    """Fastmax output by an explicit double loop over (query, key) pairs."""
    qh, kh, v = (as_matrix(a) for a in (qh, kh, v))
    check_same_shape(qh=qh, kh=kh, v=v)
    n, d = v.shape
    out = np.empty((n, d))
    for i in range(n):
        num = np.zeros(d)
        den = 0.0
        last = i + 1 if masked else n
        for j in range(last):
            w = poly_kernel(float(np.dot(qh[i], kh[j])), p)
            num += w * v[j]
            den += w
        if abs(den) < _DENOM_FLOOR:
            raise NumericalInstability(i, den)
        out[i] = num / den
    return out


def _kernel_matrix(qh, kh, p, masked):
    s = qh @ kh.T
    f = poly_kernel(s, p)
    if masked:
        f[~_causal_mask(len(s))] = 0.0
    g = f.sum(axis=1)
    bad = np.flatnonzero(np.abs(g) < _DENOM_FLOOR)
    if bad.size:
        raise NumericalInstability(int(bad[0]), float(g[bad[0]]))
    return s, f, g


def explicit_attention(qh, kh, p=2, masked=False):
    """The full N x N Fastmax attention matrix (rows sum to one)."""
    qh, kh = as_matrix(qh), as_matrix(kh)
    check_same_shape(qh=qh, kh=kh)
    _, f, g = _kernel_matrix(qh, kh, p, masked)
    return f / g[:, None]


def cancellation(qh, kh, p=2, masked=False):
    """Worst row ratio ``sum_n |f(s_in)| / |sum_n f(s_in)|`` (1 when no cancellation)."""
    _, f, g = _kernel_matrix(as_matrix(qh), as_matrix(kh), p, masked)
    return float(np.max(np.abs(f).sum(axis=1) / np.abs(g)))


def score_derivative(qh, kh, v, p=2, masked=False):
    """``d o_ij / d s_il`` as an (N, D, N) array indexed ``[i, j, l]``."""
    qh, kh, v = (as_matrix(a) for a in (qh, kh, v))
    s, f, g = _kernel_matrix(qh, kh, p, masked)
    o = (f / g[:, None]) @ v
    fp = poly_kernel_grad(s, p) / g[:, None]
    if masked:
        fp[~_causal_mask(len(s))] = 0.0
    # fp[i, l] * (v[l, j] - o[i, j])
    return fp[:, None, :] * (v.T[None, :, :] - o[:, :, None])


def fastmax_backward_naive(qh, kh, v, p, masked, upstream):
    """Gradients w.r.t. normalized queries/keys and values via explicit matrices."""
    qh, kh, v, upstream = (as_matrix(a) for a in (qh, kh, v, upstream))
    check_same_shape(qh=qh, kh=kh, v=v, upstream=upstream)
    s, f, g = _kernel_matrix(qh, kh, p, masked)
    a = f / g[:, None]
    o = a @ v
    dv = a.T @ upstream
    ds = poly_kernel_grad(s, p) / g[:, None] * (upstream @ v.T - (upstream * o).sum(axis=1, keepdims=True))
    if masked:
        ds[~_causal_mask(len(s))] = 0.0
    return ds @ kh, ds.T @ qh, dv
