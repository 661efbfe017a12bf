# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled KL kernels. Same contracts as :mod:`lookback._pykernels`."""

import numpy as np


cdef inline double _kl_row(const double* p, const double* log_p, const double* log_q, Py_ssize_t v) noexcept nogil:
    # Four independent accumulators break the add dependency chain.
    cdef double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0
    cdef Py_ssize_t i = 0, stop = v - v % 4
    while i < stop:
        a0 += p[i] * (log_p[i] - log_q[i])
        a1 += p[i + 1] * (log_p[i + 1] - log_q[i + 1])
        a2 += p[i + 2] * (log_p[i + 2] - log_q[i + 2])
        a3 += p[i + 3] * (log_p[i + 3] - log_q[i + 3])
        i += 4
    while i < v:
        a0 += p[i] * (log_p[i] - log_q[i])
        i += 1
    a0 = (a0 + a1) + (a2 + a3)
    return a0 if a0 > 0.0 else 0.0


def kl_rows(const double[::1] p, const double[::1] log_p, const double[:, ::1] log_q):
    """KL(p || q_j) for every row j of ``log_q`` (rows are log-probabilities)."""
    cdef Py_ssize_t n = log_q.shape[0], v = log_q.shape[1], j
    if p.shape[0] != v or log_p.shape[0] != v:
        raise ValueError("length mismatch")
    out = np.zeros(n, dtype=np.float64)
    if n == 0 or v == 0:
        return out
    cdef double[::1] res = out
    with nogil:
        for j in range(n):
            res[j] = _kl_row(&p[0], &log_p[0], &log_q[j, 0], v)
    return out


def pairwise_kl(const double[:, ::1] probs, const double[:, ::1] log_probs):
    """M[i, j] = KL(row_i || row_j)."""
    cdef Py_ssize_t n = probs.shape[0], v = probs.shape[1], a, b
    if log_probs.shape[0] != n or log_probs.shape[1] != v:
        raise ValueError("length mismatch")
    out = np.zeros((n, n), dtype=np.float64)
    if n == 0 or v == 0:
        return out
    cdef double[:, ::1] res = out
    with nogil:
        for a in range(n):
            for b in range(n):
                if a != b:
                    res[a, b] = _kl_row(&probs[a, 0], &log_probs[a, 0], &log_probs[b, 0], v)
    return out
