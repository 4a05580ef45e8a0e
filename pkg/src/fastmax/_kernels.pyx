# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for kernel-moment attention.

For keys ``y`` (N x D) and values ``w`` (N x E) the moments are

    m0[e] = sum_n w[n, e]
    m1[e, a] = sum_n w[n, e] y[n, a]
    m2[e, a, b] = sum_n w[n, e] y[n, a] y[n, b]

and evaluating them at a query row ``x`` gives
``out[e] = m0[e] + x . m1[e] + c2 * x^T m2[e] x``, i.e.
``sum_n f(x . y_n) w[n, e]`` for ``f(s) = 1 + s + c2 s^2``.  When ``u`` is
given, ``grad = sum_e u[e] * d out[e] / d x`` is returned as well.

Accumulation is always done in double precision.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.string cimport memset

cnp.import_array()


cdef inline double _dot(const double* a, const double* b, Py_ssize_t n) noexcept nogil:
    # four partial sums: breaks the add dependency chain without -ffast-math
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t k = 0
    while k + 4 <= n:
        s0 += a[k] * b[k]
        s1 += a[k + 1] * b[k + 1]
        s2 += a[k + 2] * b[k + 2]
        s3 += a[k + 3] * b[k + 3]
        k += 4
    while k < n:
        s0 += a[k] * b[k]
        k += 1
    return (s0 + s1) + (s2 + s3)


cdef inline void _eval_row(
    const double* xi, Py_ssize_t D, Py_ssize_t E, int p, double c2,
    const double* m0, const double* m1, const double* m2,
    double* t, double* out_row, const double* u_row, double* grad_row,
) noexcept nogil:
    """out[e] = m0[e] + m1[e].x + c2 x^T m2[e] x; grad = sum_e u[e] d out[e]/dx.

    ``t`` (E x D scratch) receives m2[e] @ x.
    """
    cdef Py_ssize_t a, e, DD = D * D
    cdef double acc, ue
    for e in range(E):
        acc = m0[e] + _dot(m1 + e * D, xi, D)
        if p == 2:
            for a in range(D):
                t[e * D + a] = _dot(m2 + e * DD + a * D, xi, D)
            acc += c2 * _dot(t + e * D, xi, D)
        out_row[e] = acc
    if grad_row != NULL:
        for a in range(D):
            grad_row[a] = 0.0
        for e in range(E):
            ue = u_row[e]
            for a in range(D):
                grad_row[a] += ue * m1[e * D + a]
            if p == 2:
                for a in range(D):
                    grad_row[a] += 2.0 * c2 * ue * t[e * D + a]


def moments(const floating[:, ::1] y, const floating[:, ::1] w, int p):
    cdef Py_ssize_t N = y.shape[0], D = y.shape[1], E = w.shape[1]
    cdef Py_ssize_t n, a, b, e
    cdef double we, wa
    m0_arr = np.zeros(E)
    m1_arr = np.zeros((E, D))
    m2_arr = np.zeros((E, D, D)) if p == 2 else None
    cdef double[::1] m0 = m0_arr
    cdef double[:, ::1] m1 = m1_arr
    cdef double[:, :, ::1] m2
    if p == 2:
        m2 = m2_arr
    with nogil:
        for n in range(N):
            for e in range(E):
                we = w[n, e]
                m0[e] += we
                for a in range(D):
                    wa = we * y[n, a]
                    m1[e, a] += wa
                    if p == 2:
                        for b in range(D):
                            m2[e, a, b] += wa * y[n, b]
    return m0_arr, m1_arr, m2_arr


def apply_moments(const floating[:, ::1] x, m0_arr, m1_arr, m2_arr, double c2,
                  const floating[:, ::1] u=None):
    cdef Py_ssize_t N = x.shape[0], D = x.shape[1]
    cdef Py_ssize_t i, a, e
    cdef int p = 1 if m2_arr is None else 2
    cdef double[::1] m0 = np.ascontiguousarray(m0_arr, dtype=np.float64)
    cdef Py_ssize_t E = m0.shape[0]
    cdef double[::1] m1 = np.ascontiguousarray(m1_arr, dtype=np.float64).reshape(-1)
    cdef double[::1] m2 = (np.ascontiguousarray(m2_arr, dtype=np.float64).reshape(-1)
                           if p == 2 else np.zeros(1))
    cdef double[::1] xi = np.zeros(D)
    cdef double[::1] t = np.zeros(E * D)
    cdef double[::1] orow = np.zeros(E)
    cdef double[::1] urow = np.zeros(E)
    cdef double[::1] grow = np.zeros(D)
    cdef bint want_grad = u is not None
    dt = np.float64 if floating is double else np.float32
    out_arr = np.empty((N, E), dtype=dt)
    cdef floating[:, ::1] out = out_arr
    grad_arr = np.empty((N, D), dtype=dt) if want_grad else np.empty((1, 1), dtype=dt)
    cdef floating[:, ::1] grad = grad_arr
    with nogil:
        for i in range(N):
            for a in range(D):
                xi[a] = x[i, a]
            if want_grad:
                for e in range(E):
                    urow[e] = u[i, e]
            _eval_row(&xi[0], D, E, p, c2, &m0[0], &m1[0], &m2[0], &t[0], &orow[0],
                      &urow[0], &grow[0] if want_grad else NULL)
            for e in range(E):
                out[i, e] = <floating>orow[e]
            if want_grad:
                for a in range(D):
                    grad[i, a] = <floating>grow[a]
    return out_arr, (grad_arr if want_grad else None)


def causal_apply(const floating[:, ::1] x, const floating[:, ::1] y,
                 const floating[:, ::1] w, int p, double c2,
                 const floating[:, ::1] u=None):
    """Row ``i`` sees the moments of rows ``0..i`` only (inclusive prefix)."""
    cdef Py_ssize_t N = x.shape[0], D = x.shape[1], E = w.shape[1]
    cdef Py_ssize_t i, a, b, e, DD = D * D
    cdef double we, wa
    cdef double* row
    cdef double[::1] m0 = np.zeros(E)
    cdef double[::1] m1 = np.zeros(E * D)
    cdef double[::1] m2 = np.zeros(E * DD if p == 2 else 1)
    cdef double[::1] xi = np.zeros(D)
    cdef double[::1] yi = np.zeros(D)
    cdef double[::1] t = np.zeros(E * D)
    cdef double[::1] orow = np.zeros(E)
    cdef double[::1] urow = np.zeros(E)
    cdef double[::1] grow = np.zeros(D)
    cdef bint want_grad = u is not None
    dt = np.float64 if floating is double else np.float32
    out_arr = np.empty((N, E), dtype=dt)
    cdef floating[:, ::1] out = out_arr
    grad_arr = np.empty((N, D), dtype=dt) if want_grad else np.empty((1, 1), dtype=dt)
    cdef floating[:, ::1] grad = grad_arr
    with nogil:
        for i in range(N):
            for a in range(D):
                xi[a] = x[i, a]
                yi[a] = y[i, a]
            for e in range(E):
                we = w[i, e]
                m0[e] += we
                for a in range(D):
                    wa = we * yi[a]
                    m1[e * D + a] += wa
                    if p == 2:
                        row = &m2[e * DD + a * D]
                        for b in range(D):
                            row[b] += wa * yi[b]
            if want_grad:
                for e in range(E):
                    urow[e] = u[i, e]
            _eval_row(&xi[0], D, E, p, c2, &m0[0], &m1[0], &m2[0], &t[0], &orow[0],
                      &urow[0], &grow[0] if want_grad else NULL)
            for e in range(E):
                out[i, e] = <floating>orow[e]
            if want_grad:
                for a in range(D):
                    grad[i, a] = <floating>grow[a]
    return out_arr, (grad_arr if want_grad else None)
