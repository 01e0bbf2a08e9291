# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the hot numeric kernels.

Mirrors the signatures in ``storecost._kernels_py``; ``storecost.kernels``
picks one implementation at import time.
"""

from libc.math cimport exp2

import numpy as np

cimport numpy as cnp

cnp.import_array()


def kl_bits_rows(double[:, ::1] p_log2, double[:, ::1] q_log2):
    """Row-wise KL divergence in bits between log2-probability matrices.

    Terms with p(x) == 0 contribute nothing (0 * log 0/q convention).
    """
    cdef Py_ssize_t n_rows = p_log2.shape[0]
    cdef Py_ssize_t n_cols = p_log2.shape[1]
    cdef Py_ssize_t r, c
    cdef double acc, p
    out = np.empty(n_rows, dtype=np.float64)
    cdef double[::1] out_v = out
    for r in range(n_rows):
        acc = 0.0
        for c in range(n_cols):
            p = exp2(p_log2[r, c])
            if p > 0.0:
                acc += p * (p_log2[r, c] - q_log2[r, c])
        out_v[r] = acc
    return out


def signflip_sums(double[::1] values, cnp.uint8_t[:, ::1] flips):
    """Signed sums for a block of sign-flip patterns.

    ``flips[t, j]`` nonzero means values[j] enters iteration t negated.
    Summation runs left to right; the pure-numpy fallback may round
    differently at the last ulp.
    """
    cdef Py_ssize_t n_iter = flips.shape[0]
    cdef Py_ssize_t n = values.shape[0]
    cdef Py_ssize_t t, j
    cdef double acc
    out = np.empty(n_iter, dtype=np.float64)
    cdef double[::1] out_v = out
    for t in range(n_iter):
        acc = 0.0
        for j in range(n):
            if flips[t, j]:
                acc -= values[j]
            else:
                acc += values[j]
        out_v[t] = acc
    return out
