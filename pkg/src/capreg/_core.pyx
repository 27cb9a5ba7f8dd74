# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: conv patch packing/unpacking and Jacobi sweeps.

Same contracts as capreg._kernels_py; see capreg.backend for selection.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()

NAME = "cython"

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - kh) // sh + 1
    cdef Py_ssize_t wo = (w - kw) // sw + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((b, ho, wo, c, kh, kw), dtype=dtype)
    cdef floating[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t ib, ic, oh, ow, p, q, ry, rx
    for ib in range(b):
        for oh in range(ho):
            for ow in range(wo):
                for ic in range(c):
                    ry = oh * sh
                    rx = ow * sw
                    for p in range(kh):
                        for q in range(kw):
                            out[ib, oh, ow, ic, p, q] = x[ib, ic, ry + p, rx + q]
    return out_arr


def col2im(floating[:, :, :, :, :, ::1] cols, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t b = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t c = cols.shape[3], kh = cols.shape[4], kw = cols.shape[5]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.zeros((b, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t ib, ic, oh, ow, p, q, ry, rx
    for ib in range(b):
        for oh in range(ho):
            for ow in range(wo):
                for ic in range(c):
                    ry = oh * sh
                    rx = ow * sw
                    for p in range(kh):
                        for q in range(kw):
                            dx[ib, ic, ry + p, rx + q] += cols[ib, oh, ow, ic, p, q]
    return dx_arr


def jacobi_rows(double[:, ::1] r, double[:, ::1] v, long long[:, :, ::1] pairs,
                double tol, int max_sweeps):
    cdef Py_ssize_t n = r.shape[0], m = r.shape[1]
    cdef Py_ssize_t rounds = pairs.shape[0], per_round = pairs.shape[1]
    cdef Py_ssize_t sweep, rnd, k, i, j, t
    cdef double alpha, beta, gamma, den, ratio, tau, tt, c, s, tmp, off
    off = 0.0
    for sweep in range(max_sweeps):
        off = 0.0
        for rnd in range(rounds):
            for k in range(per_round):
                i = <Py_ssize_t> pairs[rnd, k, 0]
                j = <Py_ssize_t> pairs[rnd, k, 1]
                if i >= n or j >= n:
                    continue
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for t in range(m):
                    alpha += r[i, t] * r[i, t]
                    beta += r[j, t] * r[j, t]
                    gamma += r[i, t] * r[j, t]
                den = sqrt(alpha * beta)
                if den <= 0.0:
                    continue
                ratio = fabs(gamma) / den
                if ratio > off:
                    off = ratio
                if ratio < 1e-15:
                    continue
                # small-angle (|theta| <= pi/4) rotation zeroing the Gram entry
                tau = (alpha - beta) / (2.0 * gamma)
                if tau == 0.0:
                    tt = 1.0
                elif tau > 0.0:
                    tt = 1.0 / (tau + sqrt(1.0 + tau * tau))
                else:
                    tt = -1.0 / (-tau + sqrt(1.0 + tau * tau))
                c = 1.0 / sqrt(1.0 + tt * tt)
                s = tt * c
                for t in range(m):
                    tmp = c * r[i, t] + s * r[j, t]
                    r[j, t] = -s * r[i, t] + c * r[j, t]
                    r[i, t] = tmp
                for t in range(v.shape[1]):
                    tmp = c * v[i, t] + s * v[j, t]
                    v[j, t] = -s * v[i, t] + c * v[j, t]
                    v[i, t] = tmp
        if off < tol:
            return sweep + 1, off
    return max_sweeps, off
