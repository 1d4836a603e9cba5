# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels for layer norm, masked softmax and the GELU backward pass.

All entry points take 2-D C-contiguous float64 buffers (rows x cols); the
dispatcher in ``kernels.py`` flattens leading axes before calling in.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, M_PI

cnp.import_array()

cdef double GELU_C = sqrt(2.0 / M_PI)
cdef double GELU_K = 0.044715
cdef double MASK_FILL = -1e30


def layer_norm_forward(const double[:, ::1] x, const double[::1] gain,
                       const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty((n, 1), dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[:, ::1] rstd = rstd_arr
    cdef double mean, var, c, r
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i, 0] = r
            for j in range(d):
                c = (x[i, j] - mean) * r
                xhat[i, j] = c
                y[i, j] = c * gain[j] + bias[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                        const double[:, ::1] rstd, const double[::1] gain):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j
    gx_arr = np.empty((n, d), dtype=np.float64)
    ggain_arr = np.zeros(d, dtype=np.float64)
    gbias_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    cdef double m1, m2, g
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = gy[i, j] * gain[j]
                m1 += g
                m2 += g * xhat[i, j]
                ggain[j] += gy[i, j] * xhat[i, j]
                gbias[j] += gy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                gx[i, j] = rstd[i, 0] * (gy[i, j] * gain[j] - m1 - xhat[i, j] * m2)
    return gx_arr, ggain_arr, gbias_arr


def masked_softmax_forward(const double[:, ::1] x, const unsigned char[:, ::1] valid):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double mx, s, v
    with nogil:
        for i in range(n):
            mx = MASK_FILL
            for j in range(d):
                if valid[i, j] and x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(d):
                if valid[i, j]:
                    v = exp(x[i, j] - mx)
                    y[i, j] = v
                    s += v
                else:
                    y[i, j] = 0.0
            for j in range(d):
                y[i, j] = y[i, j] / s
    return y_arr


def masked_softmax_backward(const double[:, ::1] gy, const double[:, ::1] y):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j
    gx_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += gy[i, j] * y[i, j]
            for j in range(d):
                gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return gx_arr


def gelu_backward(const double[:, ::1] gy, const double[:, ::1] x, const double[:, ::1] t):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j
    gx_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double v, tv
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                tv = t[i, j]
                gx[i, j] = gy[i, j] * (0.5 * (1.0 + tv)
                                       + 0.5 * v * (1.0 - tv * tv) * GELU_C * (1.0 + 3.0 * GELU_K * v * v))
    return gx_arr
