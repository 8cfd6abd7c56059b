# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled privacy-loss kernels: fused max-shifted log-sum-exp per sample.

Mirrors _mc_fallback exactly; see that module for the contract.
"""

from libc.math cimport exp, log

import numpy as np

BACKEND = "cython"


def log_ratio_add(double[:, ::1] shift, long long[::1] idx,
                  double[:, ::1] noise, double inv_sigma, double[::1] out):
    cdef Py_ssize_t m = noise.shape[0]
    cdef Py_ssize_t b = noise.shape[1]
    cdef Py_ssize_t j, k, i
    cdef double peak, acc, s
    cdef double log_b = log(<double> shift.shape[0])
    with nogil:
        for j in range(m):
            i = <Py_ssize_t> idx[j]
            peak = shift[i, 0] + noise[j, 0] * inv_sigma
            for k in range(1, b):
                s = shift[i, k] + noise[j, k] * inv_sigma
                if s > peak:
                    peak = s
            acc = 0.0
            for k in range(b):
                acc += exp(shift[i, k] + noise[j, k] * inv_sigma - peak)
            out[j] = peak + log(acc) - log_b


def log_ratio_remove(double[::1] diag_half, double[:, ::1] noise,
                     double inv_sigma, double[::1] out):
    cdef Py_ssize_t m = noise.shape[0]
    cdef Py_ssize_t b = noise.shape[1]
    cdef Py_ssize_t j, k
    cdef double peak, acc, s
    cdef double log_b = log(<double> diag_half.shape[0])
    with nogil:
        for j in range(m):
            peak = noise[j, 0] * inv_sigma - diag_half[0]
            for k in range(1, b):
                s = noise[j, k] * inv_sigma - diag_half[k]
                if s > peak:
                    peak = s
            acc = 0.0
            for k in range(b):
                acc += exp(noise[j, k] * inv_sigma - diag_half[k] - peak)
            out[j] = -(peak + log(acc) - log_b)
