"""NumPy implementations of the kernels in ``_kernels.pyx``.

Same signatures and semantics; used when the compiled extension is missing
or ``FASTMAX_BACKEND=python`` is set.  Row-blocked so temporaries stay
bounded independent of N.
"""
import numpy as np

# element budget for per-block temporaries
_BLOCK_ELEMS = 1 << 16


def _block_rows(per_row):
    return max(1, _BLOCK_ELEMS // max(1, per_row))


def _outer_rows(x):
    n, d = x.shape
    return (x[:, :, None] * x[:, None, :]).reshape(n, d * d)


def moments(y, w, p):
    m0 = w.sum(axis=0, dtype=np.float64)
    m1 = np.asarray(w.T @ y, dtype=np.float64)
    m2 = None
    if p == 2:
        n, d = y.shape
        e = w.shape[1]
        m2 = np.zeros((e, d * d))
        step = _block_rows(d * d)
        for s in range(0, n, step):
            m2 += w[s:s + step].T @ _outer_rows(y[s:s + step])
        m2 = m2.reshape(e, d, d)
    return m0, m1, m2


def _eval_block(x, m0, m1, m2, c2, u):
    out = m0 + x @ m1.T
    if m2 is not None:
        e, d, _ = m2.shape
        out = out + c2 * (_outer_rows(x) @ m2.reshape(e, d * d).T)
    grad = None
    if u is not None:
        grad = u @ m1
        if m2 is not None:
            um2 = (u @ m2.reshape(e, d * d)).reshape(-1, d, d)
            grad = grad + 2.0 * c2 * np.einsum("iab,ib->ia", um2, x)
    return out.astype(x.dtype, copy=False), grad if grad is None else grad.astype(x.dtype, copy=False)


def apply_moments(x, m0, m1, m2, c2, u=None):
    n, d = x.shape
    e = m0.shape[0]
    out = np.empty((n, e), dtype=x.dtype)
    grad = np.empty((n, d), dtype=x.dtype) if u is not None else None
    step = _block_rows(d * d + e)
    for s in range(0, n, step):
        ub = None if u is None else u[s:s + step]
        o, g = _eval_block(x[s:s + step], m0, m1, m2, c2, ub)
        out[s:s + step] = o
        if grad is not None:
            grad[s:s + step] = g
    return out, grad


def causal_apply(x, y, w, p, c2, u=None):
    """Row ``i`` sees the moments of rows ``0..i`` only (inclusive prefix)."""
    n, d = x.shape
    e = w.shape[1]
    m0 = np.zeros(e)
    m1 = np.zeros((e, d))
    m2 = np.zeros((e, d, d)) if p == 2 else None
    out = np.empty((n, e), dtype=x.dtype)
    grad = np.empty((n, d), dtype=x.dtype) if u is not None else None
    per_row = e * d * (d if p == 2 else 1)
    step = _block_rows(per_row)
    for s in range(0, n, step):
        yb, wb, xb = y[s:s + step], w[s:s + step], x[s:s + step]
        c0 = np.cumsum(wb, axis=0, dtype=np.float64) + m0
        c1 = np.cumsum(wb[:, :, None] * yb[:, None, :], axis=0, dtype=np.float64) + m1
        lin = np.einsum("iea,ia->ie", c1, xb)
        o = c0 + lin
        if u is not None:
            ub = u[s:s + step]
            g = np.einsum("ie,iea->ia", ub, c1)
        if p == 2:
            wy = wb[:, :, None] * yb[:, None, :]
            c2m = np.cumsum(wy[:, :, :, None] * yb[:, None, None, :], axis=0, dtype=np.float64) + m2
            c2x = np.einsum("ieab,ib->iea", c2m, xb)
            o = o + c2 * np.einsum("iea,ia->ie", c2x, xb)
            if u is not None:
                g = g + 2.0 * c2 * np.einsum("ie,iea->ia", ub, c2x)
            m2 = c2m[-1]
        m0, m1 = c0[-1], c1[-1]
        out[s:s + step] = o
        if grad is not None:
            grad[s:s + step] = g
    return out, grad
