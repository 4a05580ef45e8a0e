"""Custom backward pass for the full Fastmax block, and its certification.

The backward stores only Q^, K^, V, the per-row denominators ``g`` and
numerators ``F`` (plus the row scales of the normalization), i.e. O(N D)
numbers.  Writing ``Gt = dL/dO / g`` and ``c_i = -sum_j dL/dO_ij o_ij / g_i``,
and appending ``c`` to ``Gt`` and a ones column to ``V``:

    dQ^_i = sum_n f'(s_in) (Gt_i . V_n) K^_n
    dK^_n = sum_i f'(s_in) (Gt_i . V_n) Q^_i
    dV_n  = sum_i f(s_in) Gt_i

Each line is a kernel sum of the same shape as the forward pass, so the
moment trick applies with ``(K^, V)`` for the first and ``(Q^, Gt)`` for the
other two.  In causal mode the first is a prefix sweep and the others a
suffix sweep; neither keeps per-prefix terms around.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import oracle
from .core import AttentionConfig, kernel_sums, standardize_rows, _split_scores, _check_dims
from .errors import ConfigError, NumericalInstability
from .tensor import Rng, as_matrix, check_same_shape


@dataclass(frozen=True)
class BackwardCache:
    qh: np.ndarray
    kh: np.ndarray
    v: np.ndarray
    g: np.ndarray
    fv: np.ndarray
    q_std: np.ndarray
    k_std: np.ndarray

    @property
    def output(self):
        return self.fv / self.g[:, None]


@dataclass(frozen=True)
class GradTriple:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray

    def __iter__(self):
        return iter((self.dq, self.dk, self.dv))


def forward_with_cache(q, k, v, cfg=None):
    cfg = cfg or AttentionConfig()
    if cfg.dropout_mode != "none" and cfg.dropout_rate > 0:
        raise ConfigError("the differentiable path does not support dropout")
    q, k, v = as_matrix(q, "q"), as_matrix(k, "k"), as_matrix(v, "v")
    check_same_shape(q=q, k=k, v=v)
    n, d = q.shape
    _check_dims(d, cfg.p)
    qh, q_std = standardize_rows(q, cfg.eps)
    kh, k_std = standardize_rows(k, cfg.eps)
    w = np.empty((n, d + 1))
    w[:, :d] = v
    w[:, d] = 1.0
    out, _ = kernel_sums(qh, kh, w, cfg.p, cfg.masked)
    fv, g = _split_scores(out, d, np.float64)
    cache = BackwardCache(qh, kh, v, g, fv, q_std, k_std)
    return cache.output, cache


def _standardize_backward(xh, std, grad, eps):
    """Rowwise chain rule through center-and-scale; zero where ``std <= eps``."""
    mean_g = grad.mean(axis=1, keepdims=True)
    mean_gx = (grad * xh).mean(axis=1, keepdims=True)
    active = std > eps
    scale = np.where(active, 1.0 / np.where(active, std, 1.0), 0.0)
    return (grad - mean_g - xh * mean_gx) * scale[:, None]


def normalization_backward(raw_row, grad_out_row, eps=1e-6):
    """Gradient w.r.t. a raw row given the gradient w.r.t. its standardized form."""
    raw = np.asarray(raw_row, dtype=np.float64).reshape(1, -1)
    xh, std = standardize_rows(raw, eps)
    grad = np.asarray(grad_out_row, dtype=np.float64).reshape(1, -1)
    return _standardize_backward(xh, std, grad, eps)[0]


def backward(cache, cfg, upstream):
    """Gradients of ``sum(upstream * O)`` w.r.t. the raw q, k, v."""
    cfg = cfg or AttentionConfig()
    upstream = as_matrix(upstream, "upstream")
    check_same_shape(v=cache.v, upstream=upstream)
    n, d = upstream.shape
    o = cache.output
    gt = np.empty((n, d + 1))
    gt[:, :d] = upstream / cache.g[:, None]
    gt[:, d] = -(upstream * o).sum(axis=1) / cache.g
    w = np.empty((n, d + 1))
    w[:, :d] = cache.v
    w[:, d] = 1.0
    _, dqh = kernel_sums(cache.qh, cache.kh, w, cfg.p, cfg.masked, u=gt)
    dv, dkh = kernel_sums(cache.kh, cache.qh, gt, cfg.p, cfg.masked, u=w, reverse=True)
    return GradTriple(
        _standardize_backward(cache.qh, cache.q_std, dqh, cfg.eps),
        _standardize_backward(cache.kh, cache.k_std, dkh, cfg.eps),
        np.ascontiguousarray(dv[:, :d]),
    )


def naive_backward(q, k, v, cfg, upstream):
    """Explicit-matrix gradients chained through the normalization (oracle)."""
    qh, q_std = standardize_rows(as_matrix(q), cfg.eps)
    kh, k_std = standardize_rows(as_matrix(k), cfg.eps)
    dqh, dkh, dv = oracle.fastmax_backward_naive(qh, kh, v, cfg.p, cfg.masked, upstream)
    return GradTriple(
        _standardize_backward(qh, q_std, dqh, cfg.eps),
        _standardize_backward(kh, k_std, dkh, cfg.eps),
        dv,
    )


# -- finite differences ---------------------------------------------------------------

def rel_error(a, b):
    """``max |a - b| / max(1, |a|, |b|)``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def numerical_grads(loss, inputs, h=1e-5):
    """Central differences of scalar ``loss(*inputs)`` w.r.t. every input entry."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    grads = []
    for x in inputs:
        gx = np.empty_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            up = loss(*inputs)
            x[idx] = orig - h
            down = loss(*inputs)
            x[idx] = orig
            gx[idx] = (up - down) / (2 * h)
        grads.append(gx)
    return grads


@dataclass
class GradRow:
    name: str
    fd_error: float = 0.0
    naive_error: float = 0.0


@dataclass
class GradReport:
    cfg: AttentionConfig
    trials: int
    rows: list = field(default_factory=list)
    max_score_derivative: float = 0.0
    skipped: int = 0
    fd_rtol: float = 1e-4
    naive_rtol: float = 1e-8

    @property
    def passed(self):
        return all(r.fd_error <= self.fd_rtol and r.naive_error <= self.naive_rtol for r in self.rows)

    def format_table(self):
        lines = [
            f"# p={self.cfg.p} masked={self.cfg.masked} trials={self.trials} "
            f"redrawn_ill_conditioned={self.skipped}",
            f"{'grad':<6}{'max_err_fd':>14}{'max_err_naive':>16}  result",
        ]
        for r in self.rows:
            ok = r.fd_error <= self.fd_rtol and r.naive_error <= self.naive_rtol
            lines.append(f"{r.name:<6}{r.fd_error:>14.3e}{r.naive_error:>16.3e}  {'PASS' if ok else 'FAIL'}")
        lines.append(f"# max |do/ds| observed: {self.max_score_derivative:.4g}")
        return "\n".join(lines)


def check_gradients(cfg, trials, rng, max_n=16, max_d=8, h=1e-5, backward_fn=None,
                    max_cancellation=100.0):
    """Randomized certification of :func:`backward` against finite differences
    and against the explicit-matrix backward.

    Instances whose forward pass is singular or nearly so are redrawn and
    counted in ``skipped``: a row whose denominator cancels, so that
    ``sum_n |f(s_in)| / |g_i|`` exceeds ``max_cancellation``, has third
    derivatives large enough to swamp central differences.  Only degree-1
    kernels can cancel; at p=2 every ``f(s) > 0``.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    backward_fn = backward_fn or backward
    report = GradReport(cfg, trials, [GradRow("dq"), GradRow("dk"), GradRow("dv")])
    done = 0
    while done < trials:
        n = int(rng.integers(1, max_n + 1, 1)[0])
        d = int(rng.integers(1, max_d + 1, 1)[0])
        q, k, v, up = (rng.normal((n, d)) for _ in range(4))
        try:
            _, cache = forward_with_cache(q, k, v, cfg)
            naive = naive_backward(q, k, v, cfg, up)
            dsdo = oracle.score_derivative(cache.qh, cache.kh, v, cfg.p, cfg.masked)
        except NumericalInstability:
            report.skipped += 1
            continue
        if oracle.cancellation(cache.qh, cache.kh, cfg.p, cfg.masked) > max_cancellation:
            report.skipped += 1
            continue
        got = backward_fn(cache, cfg, up)

        def loss(q_, k_, v_):
            o, _ = forward_with_cache(q_, k_, v_, cfg)
            return float((up * o).sum())

        try:
            fd = numerical_grads(loss, (q, k, v), h)
        except NumericalInstability:
            report.skipped += 1
            continue
        for row, a, b, c in zip(report.rows, got, fd, naive):
            row.fd_error = max(row.fd_error, rel_error(a, b))
            row.naive_error = max(row.naive_error, rel_error(a, c))
        report.max_score_derivative = max(report.max_score_derivative, float(np.abs(dsdo).max()))
        done += 1
    return report
