# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled ray-accumulation kernel; mirrors fallback.ray_sum exactly."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def ray_sum(cnp.ndarray[cnp.complex128_t, ndim=2] phase,
            cnp.ndarray[cnp.complex128_t, ndim=2] a_rx,
            cnp.ndarray[cnp.complex128_t, ndim=2] tx_row,
            cnp.ndarray[cnp.complex128_t, ndim=3] out):
    cdef Py_ssize_t n_rays = phase.shape[0]
    cdef Py_ssize_t n_k = phase.shape[1]
    cdef Py_ssize_t n_rx = a_rx.shape[1]
    cdef Py_ssize_t n_tx = tx_row.shape[1]
    cdef Py_ssize_t r, k, i, j
    cdef double complex c2
    for r in range(n_rays):
        for k in range(n_k):
            for i in range(n_rx):
                c2 = phase[r, k] * a_rx[r, i]
                for j in range(n_tx):
                    out[k, i, j] = out[k, i, j] + c2 * tx_row[r, j]
    return out
