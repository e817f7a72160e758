# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels for softmax, log-softmax and layer norm.

Mirrors ``_kernels_py`` function for function. Arrays are 2-D, C-contiguous,
the last axis is reduced.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, log, sqrt

cnp.import_array()


cdef inline double _exp(floating v) noexcept nogil:
    # single-precision exp for float32 rows; sums stay in double
    if floating is float:
        return expf(v)
    return exp(v)


def softmax_forward(floating[:, ::1] x, const unsigned char[:, ::1] valid=None):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    cdef double m, s, e
    cdef int seen
    cdef bint has_mask = valid is not None
    out = np.empty((n, k), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] y = out
    if has_mask and (valid.shape[0] != n or valid.shape[1] != k):
        raise ValueError("masked softmax: mask shape does not match scores")
    with nogil:
        for i in range(n):
            seen = 0
            m = 0.0
            for j in range(k):
                if not has_mask or valid[i, j]:
                    if not seen or x[i, j] > m:
                        m = x[i, j]
                    seen = 1
            if not seen:
                with gil:
                    raise ValueError(f"masked softmax: row {i} has no valid position")
            s = 0.0
            for j in range(k):
                if not has_mask or valid[i, j]:
                    e = _exp(<floating>(x[i, j] - m))
                    y[i, j] = <floating>e
                    s += e
                else:
                    y[i, j] = 0
            s = 1.0 / s
            for j in range(k):
                y[i, j] = <floating>(y[i, j] * s)
    return out


def softmax_backward(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], k = y.shape[1], i, j
    cdef double dot
    out = np.empty((n, k), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] gx = out
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(k):
                dot += gy[i, j] * y[i, j]
            for j in range(k):
                gx[i, j] = <floating>(y[i, j] * (gy[i, j] - dot))
    return out


def log_softmax_forward(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    cdef double m, s
    out = np.empty((n, k), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] y = out
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, k):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(k):
                s += _exp(<floating>(x[i, j] - m))
            s = log(s) + m
            for j in range(k):
                y[i, j] = <floating>(x[i, j] - s)
    return out


def log_softmax_backward(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], k = y.shape[1], i, j
    cdef double s
    out = np.empty((n, k), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] gx = out
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(k):
                s += gy[i, j]
            for j in range(k):
                gx[i, j] = <floating>(gy[i, j] - _exp(y[i, j]) * s)
    return out


def layer_norm_forward(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    cdef double mu, var, r, d
    dt = np.float32 if floating is float else np.float64
    out = np.empty((n, k), dtype=dt)
    xh = np.empty((n, k), dtype=dt)
    rs = np.empty(n, dtype=dt)
    cdef floating[:, ::1] y = out
    cdef floating[:, ::1] xhat = xh
    cdef floating[::1] rstd = rs
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(k):
                mu += x[i, j]
            mu /= k
            var = 0.0
            for j in range(k):
                d = x[i, j] - mu
                var += d * d
            var /= k
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <floating>r
            for j in range(k):
                d = (x[i, j] - mu) * r
                xhat[i, j] = <floating>d
                y[i, j] = <floating>(d * gain[j] + bias[j])
    return out, xh, rs


def layer_norm_backward(floating[:, ::1] gy, floating[:, ::1] xhat, floating[::1] rstd,
                        floating[::1] gain):
    cdef Py_ssize_t n = gy.shape[0], k = gy.shape[1], i, j
    cdef double sg, sgx, g
    dt = np.float32 if floating is float else np.float64
    out = np.empty((n, k), dtype=dt)
    acc_gain = np.zeros(k, dtype=np.float64)
    acc_bias = np.zeros(k, dtype=np.float64)
    cdef floating[:, ::1] gx = out
    cdef double[::1] gg = acc_gain
    cdef double[::1] gb = acc_bias
    with nogil:
        for i in range(n):
            sg = 0.0
            sgx = 0.0
            for j in range(k):
                g = gy[i, j] * gain[j]
                sg += g
                sgx += g * xhat[i, j]
                gg[j] += gy[i, j] * xhat[i, j]
                gb[j] += gy[i, j]
            for j in range(k):
                g = gy[i, j] * gain[j]
                gx[i, j] = <floating>((rstd[i] / k) * (k * g - sg - xhat[i, j] * sgx))
    return out, acc_gain.astype(dt), acc_bias.astype(dt)
