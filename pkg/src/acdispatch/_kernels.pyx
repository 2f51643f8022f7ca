# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled branch kernels; same contract as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin

IMPLEMENTATION = "cython"


def flows(double[:, :, ::1] K, long[::1] f, long[::1] t, double[::1] theta, double[::1] vm):
    cdef Py_ssize_t m = f.shape[0], b, k
    cdef double d, c, s, vf, vt
    out_arr = np.empty((4, m))
    cdef double[:, ::1] out = out_arr
    for b in range(m):
        d = theta[f[b]] - theta[t[b]]
        c = cos(d)
        s = sin(d)
        vf = vm[f[b]]
        vt = vm[t[b]]
        for k in range(4):
            out[k, b] = (K[k, 0, b] * vf * vf + K[k, 1, b] * vt * vt
                         + vf * vt * (K[k, 2, b] * c + K[k, 3, b] * s))
    return out_arr


def flow_grads(double[:, :, ::1] K, long[::1] f, long[::1] t, double[::1] theta, double[::1] vm):
    cdef Py_ssize_t m = f.shape[0], b, k
    cdef double d, c, s, vf, vt, C, D
    out_arr = np.empty((4, 4, m))
    cdef double[:, :, ::1] out = out_arr
    for b in range(m):
        d = theta[f[b]] - theta[t[b]]
        c = cos(d)
        s = sin(d)
        vf = vm[f[b]]
        vt = vm[t[b]]
        for k in range(4):
            C = K[k, 2, b] * c + K[k, 3, b] * s
            D = -K[k, 2, b] * s + K[k, 3, b] * c
            out[k, 0, b] = vf * vt * D
            out[k, 1, b] = -vf * vt * D
            out[k, 2, b] = 2.0 * K[k, 0, b] * vf + vt * C
            out[k, 3, b] = 2.0 * K[k, 1, b] * vt + vf * C
    return out_arr


def weighted_hessian(double[:, :, ::1] K, long[::1] f, long[::1] t, double[::1] theta,
                     double[::1] vm, double[:, ::1] w):
    cdef Py_ssize_t m = f.shape[0], b, k, i, j
    cdef double d, c, s, vf, vt, C, D, vv
    cdef double a0, a1, a2, a3
    out_arr = np.empty((4, 4, m))
    cdef double[:, :, ::1] h = out_arr
    for b in range(m):
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        a3 = 0.0
        for k in range(4):
            a0 += w[k, b] * K[k, 0, b]
            a1 += w[k, b] * K[k, 1, b]
            a2 += w[k, b] * K[k, 2, b]
            a3 += w[k, b] * K[k, 3, b]
        d = theta[f[b]] - theta[t[b]]
        c = cos(d)
        s = sin(d)
        vf = vm[f[b]]
        vt = vm[t[b]]
        vv = vf * vt
        C = a2 * c + a3 * s
        D = -a2 * s + a3 * c
        h[0, 0, b] = -vv * C
        h[0, 1, b] = vv * C
        h[1, 1, b] = -vv * C
        h[0, 2, b] = vt * D
        h[0, 3, b] = vf * D
        h[1, 2, b] = -vt * D
        h[1, 3, b] = -vf * D
        h[2, 2, b] = 2.0 * a0
        h[3, 3, b] = 2.0 * a1
        h[2, 3, b] = C
        for i in range(4):
            for j in range(i):
                h[i, j, b] = h[j, i, b]
    return out_arr
