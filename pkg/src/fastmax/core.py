"""Linear-cost Fastmax attention.

Queries and keys are standardized per row, scored with the truncated
exponential series ``f(s) = sum_{l<=p} s**l / l!`` and the row-normalized
attention is applied to the values without forming the N x N matrix: the
key/value sums are collected once into moment terms

    x1[j]       = sum_n v[n, j]             y1       = N
    x2[j, m]    = sum_n k[n, m] v[n, j]     y2[m]    = sum_n k[n, m]
    x3[j, m, l] = sum_n k[n, m] k[n, l] v[n, j]
                                            y3[m, l] = sum_n k[n, m] k[n, l]

and each output row is ``f_ij / g_i`` with

    f_ij = x1[j] + q_i . x2[j] + 1/2 q_i^T x3[j] q_i
    g_i  = y1    + q_i . y2    + 1/2 q_i^T y3    q_i.

Causal attention uses running prefix sums of the same terms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _backend, flops
from .errors import ConfigError, DimensionError, NumericalInstability
from .tensor import Rng, as_matrix, check_same_shape

# 1/2! on the degree-2 term of the factorized expansion
QUADRATIC_COEF = 0.5

DROPOUT_MODES = ("none", "standard", "one_d", "quadratic")
MAX_D_QUADRATIC = 64
DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class AttentionConfig:
    p: int = 2
    masked: bool = False
    eps: float = 1e-6
    dropout_mode: str = "none"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ConfigError(f"kernel degree p must be 1 or 2, got {self.p}")
        if self.dropout_mode not in DROPOUT_MODES:
            raise ConfigError(f"dropout_mode must be one of {DROPOUT_MODES}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.dropout_mode == "quadratic" and self.p == 1:
            raise ConfigError("quadratic dropout needs p=2 (no quadratic terms at p=1)")


@dataclass(frozen=True)
class NormalizedPair:
    qh: np.ndarray
    kh: np.ndarray


@dataclass(frozen=True)
class FactorizedTerms:
    """Key/value moment terms; causal terms carry a leading prefix axis.

    ``x3``/``y3`` are ``None`` for ``p == 1``.
    """

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray | None
    y1: np.ndarray | float
    y2: np.ndarray
    y3: np.ndarray | None
    causal: bool = False

    @property
    def p(self):
        return 1 if self.x3 is None else 2

    def arrays(self):
        return {k: getattr(self, k) for k in ("x1", "x2", "x3", "y1", "y2", "y3")}


# -- scalar kernel -------------------------------------------------------------

def poly_kernel(x, p):
    """Truncated exponential series ``sum_{l=0}^{p} x**l / l!``."""
    if not isinstance(x, float):
        x = np.asarray(x, dtype=np.float64)
    total = 0.0 * x
    term = 1.0
    for ell in range(p + 1):
        total = total + term / math.factorial(ell)
        term = term * x
    return total


def poly_kernel_grad(x, p):
    """Derivative of :func:`poly_kernel`: ``sum_{l=1}^{p} x**(l-1) / (l-1)!``."""
    return poly_kernel(x, p - 1)


# -- flop accounting (see fastmax.flops for the convention) --------------------

def _normalize_flops(n, d):
    return n * (2 * d + 2), n * 3 * d


def _terms_flops(n, d, p):
    mults = n * d * d                      # x2
    adds = n * (d + d * d + d)             # x1, x2, y2
    if p == 2:
        mults += n * (d * d + d ** 3)      # k k^T outer, x3
        adds += n * (d ** 3 + d * d)       # x3, y3 (reuses the outer product)
    return mults, adds


def _forward_flops(n, d, p):
    e = d + 1                              # f columns plus g
    mults = n * (e * d + d)                # linear term, final division
    adds = n * (e * d + e)
    if p == 2:
        mults += n * (d * d + e * d * d + e)   # q q^T, quadratic term, 1/2
        adds += n * (e * d * d + e)
    return mults, adds


def _count(pair):
    flops.count(mults=pair[0], adds=pair[1])


# -- normalization ---------------------------------------------------------------

def standardize_rows(x, eps=1e-6):
    """Center each row and divide by ``max(std, eps)`` (population std).

    Returns ``(xh, std)`` with the raw, unfloored std per row.
    """
    centered = x - x.mean(axis=1, keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=1))
    xh = centered / np.maximum(std, eps)[:, None]
    _count(_normalize_flops(*x.shape))
    return xh, std


def normalize_qk(q, k, eps=1e-6):
    q, k = _as_operand(q, "q"), _as_operand(k, "k")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"q and k widths differ: {q.shape} vs {k.shape}")
    return NormalizedPair(standardize_rows(q, eps)[0], standardize_rows(k, eps)[0])


def _as_operand(a, name):
    # float32 passes through untouched for the benchmark path
    if isinstance(a, np.ndarray) and a.dtype == np.float32 and a.ndim == 2:
        return np.ascontiguousarray(a)
    return as_matrix(a, name)


def _check_dims(d, p):
    if p not in (1, 2):
        raise ConfigError(f"kernel degree p must be 1 or 2, got {p}")
    if p == 2 and d > MAX_D_QUADRATIC:
        raise ConfigError(
            f"D={d} exceeds {MAX_D_QUADRATIC} for p=2 (D^3 term storage); "
            "split the channels over more heads to shrink D"
        )


# -- factorized terms ---------------------------------------------------------------

def build_terms_flat(kh, v, p=2):
    kh, v = _as_operand(kh, "kh"), _as_operand(v, "v")
    check_same_shape(kh=kh, v=v)
    n, d = kh.shape
    _check_dims(d, p)
    x1, x2, x3 = _backend.kernels().moments(kh, v, p)
    y2 = kh.sum(axis=0, dtype=np.float64)
    y3 = kh.T.astype(np.float64) @ kh if p == 2 else None
    _count(_terms_flops(n, d, p))
    return FactorizedTerms(x1, x2, x3, float(n), y2, y3, causal=False)


def build_terms_causal(kh, v, p=2):
    """Per-prefix terms: entry ``i`` sums tokens ``0..i`` (running recursions)."""
    kh, v = _as_operand(kh, "kh"), _as_operand(v, "v")
    check_same_shape(kh=kh, v=v)
    n, d = kh.shape
    _check_dims(d, p)
    kh64, v64 = kh.astype(np.float64), v.astype(np.float64)
    x1 = np.cumsum(v64, axis=0)
    kv = v64[:, :, None] * kh64[:, None, :]
    x2 = np.cumsum(kv, axis=0)
    y1 = np.arange(1, n + 1, dtype=np.float64)
    y2 = np.cumsum(kh64, axis=0)
    x3 = y3 = None
    if p == 2:
        kk = kh64[:, :, None] * kh64[:, None, :]
        x3 = np.cumsum(kv[:, :, :, None] * kh64[:, None, None, :], axis=0)
        y3 = np.cumsum(kk, axis=0)
    _count(_terms_flops(n, d, p))
    return FactorizedTerms(x1, x2, x3, y1, y2, y3, causal=True)


def _stack_terms(t):
    """Concatenate x- and y-terms along the value axis (g becomes column D)."""
    lead = t.x1.shape[:-1]
    y1 = np.broadcast_to(np.asarray(t.y1, dtype=np.float64), lead)[..., None]
    m0 = np.concatenate([t.x1, y1], axis=-1)
    m1 = np.concatenate([t.x2, t.y2[..., None, :]], axis=-2)
    m2 = None
    if t.x3 is not None:
        m2 = np.concatenate([t.x3, t.y3[..., None, :, :]], axis=-3)
    return m0, m1, m2


def _split_scores(out, d, dtype):
    fv = np.ascontiguousarray(out[:, :d])
    g = np.ascontiguousarray(out[:, d])
    bad = np.flatnonzero(~(np.abs(g) >= DENOM_FLOOR))
    if bad.size:
        raise NumericalInstability(int(bad[0]), float(g[bad[0]]))
    return fv.astype(dtype, copy=False), g.astype(dtype, copy=False)


def fastmax_forward(qh, terms, p=2, masked=False):
    """Evaluate ``F / G`` at the normalized queries from prebuilt terms."""
    qh = _as_operand(qh, "qh")
    n, d = qh.shape
    if terms.p != p:
        raise ConfigError(f"terms were built for p={terms.p}, asked for p={p}")
    if terms.causal != masked:
        raise ConfigError("masked attention needs causal terms (and vice versa)")
    if terms.x1.shape[-1] != d:
        raise DimensionError(f"terms are for D={terms.x1.shape[-1]}, queries have D={d}")
    m0, m1, m2 = _stack_terms(terms)
    if masked:
        if len(m0) != n:
            raise DimensionError(f"causal terms cover {len(m0)} tokens, queries have {n}")
        q64 = qh.astype(np.float64)
        out = m0 + np.einsum("iea,ia->ie", m1, q64)
        if m2 is not None:
            out += QUADRATIC_COEF * np.einsum("ieab,ia,ib->ie", m2, q64, q64)
    else:
        out, _ = _backend.kernels().apply_moments(qh, m0, m1, m2, QUADRATIC_COEF)
    _count(_forward_flops(n, d, p))
    fv, g = _split_scores(out, d, qh.dtype)
    return fv / g[:, None]


# -- fused path -----------------------------------------------------------------------

def kernel_sums(x, y, w, p, masked, u=None, reverse=False):
    """``out_i = sum_n f(x_i . y_n) w_n`` and optionally ``sum_e u_ie d out_ie / d x_i``.

    With ``masked`` the sum runs over ``n <= i`` (``n >= i`` when ``reverse``).
    Memory beyond the operands is O(E D^p) for the running terms.
    """
    k = _backend.kernels()
    if not masked:
        m0, m1, m2 = k.moments(y, w, p)
        return k.apply_moments(x, m0, m1, m2, QUADRATIC_COEF, u)
    if reverse:
        x, y, w = x[::-1].copy(), y[::-1].copy(), w[::-1].copy()
        u = None if u is None else u[::-1].copy()
    out, grad = k.causal_apply(x, y, w, p, QUADRATIC_COEF, u)
    if reverse:
        out = out[::-1].copy()
        grad = None if grad is None else grad[::-1].copy()
    return out, grad


def fastmax_scores(qh, kh, v, p=2, masked=False):
    """Numerators ``F`` and denominators ``g`` straight from Q^, K^, V.

    Equivalent to building the terms and calling :func:`fastmax_forward`, but
    the causal prefix terms are streamed instead of materialized.
    """
    n, d = qh.shape
    _check_dims(d, p)
    w = np.empty((n, d + 1), dtype=v.dtype)
    w[:, :d] = v
    w[:, d] = 1.0
    out, _ = kernel_sums(qh, kh, w, p, masked)
    _count(_terms_flops(n, d, p))
    _count(_forward_flops(n, d, p))
    return _split_scores(out, d, v.dtype)


# -- dropout on the factorized terms ---------------------------------------------------

def _inverted_mask(rng, shape, rate):
    keep = rng.uniform(shape) >= rate
    return keep / (1.0 - rate)


def apply_dropout(terms, mode, rate, rng):
    """Drop entries of the factorized terms (inverted-dropout scaling).

    ``standard`` masks every scalar of every term independently; ``one_d``
    draws one mask per key channel ``m`` and applies it to every term entry
    indexed by that channel (``x3``/``y3`` get the product over both channels,
    as if the channel were dropped from K^ before building the terms);
    ``quadratic`` masks only ``x3`` and ``y3`` entries.
    """
    if mode not in DROPOUT_MODES or mode == "none":
        raise ConfigError(f"dropout mode must be one of {DROPOUT_MODES[1:]}, got {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise ConfigError("dropout rate must lie in [0, 1)")
    if mode == "quadratic" and terms.p == 1:
        raise ConfigError("quadratic dropout needs p=2 (no quadratic terms at p=1)")
    if rate == 0.0:
        return terms
    if mode == "standard":
        new = {}
        for name, arr in terms.arrays().items():
            if arr is None:
                new[name] = None
            else:
                arr = np.asarray(arr, dtype=np.float64)
                new[name] = arr * _inverted_mask(rng, arr.shape, rate)
                if new[name].ndim == 0:
                    new[name] = float(new[name])
        return replace(terms, **new)
    if mode == "quadratic":
        return replace(
            terms,
            x3=terms.x3 * _inverted_mask(rng, terms.x3.shape, rate),
            y3=terms.y3 * _inverted_mask(rng, terms.y3.shape, rate),
        )
    d = terms.x1.shape[-1]
    s = _inverted_mask(rng, d, rate)
    new = {"x2": terms.x2 * s, "y2": terms.y2 * s}
    if terms.p == 2:
        ss = s[:, None] * s[None, :]
        new["x3"] = terms.x3 * ss
        new["y3"] = terms.y3 * ss
    return replace(terms, **new)


# -- full block -------------------------------------------------------------------------

def fastmax_attention(q, k, v, cfg=None, rng=None):
    """Normalize, factorize and evaluate one attention head."""
    cfg = cfg or AttentionConfig()
    q, k, v = _as_operand(q, "q"), _as_operand(k, "k"), _as_operand(v, "v")
    check_same_shape(q=q, k=k, v=v)
    pair = normalize_qk(q, k, cfg.eps)
    if cfg.dropout_mode == "none" or cfg.dropout_rate == 0.0:
        fv, g = fastmax_scores(pair.qh, pair.kh, v, cfg.p, cfg.masked)
        return fv / g[:, None]
    if rng is None:
        raise ConfigError("dropout needs an Rng")
    build = build_terms_causal if cfg.masked else build_terms_flat
    terms = apply_dropout(build(pair.kh, v, cfg.p), cfg.dropout_mode, cfg.dropout_rate, rng)
    return fastmax_forward(pair.qh, terms, cfg.p, cfg.masked)
