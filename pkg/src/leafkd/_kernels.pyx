# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels. Same contracts as ``leafkd._kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh
from libc.stdint cimport int8_t, uint8_t, int64_t

cnp.import_array()

cdef extern from *:
    int __builtin_popcount(unsigned int x) nogil

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def softmax_rows(const float[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.float32)
    cdef float[:, ::1] o = out
    cdef double[::1] buf = np.empty(m, dtype=np.float64)
    cdef double mx, s, e
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = exp(<double>x[i, j] - mx)
            buf[j] = e
            s += e
        s = 1.0 / s
        for j in range(m):
            o[i, j] = <float>(buf[j] * s)
    return out


def softmax_rows_backward(const float[:, ::1] y, const float[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m), dtype=np.float32)
    cdef float[:, ::1] o = out
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += <double>y[i, j] * <double>dy[i, j]
        for j in range(m):
            o[i, j] = <float>(<double>y[i, j] * (<double>dy[i, j] - dot))
    return out


def layer_norm_forward(const float[:, ::1] x, const float[::1] gain,
                       const float[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    y = np.empty((n, m), dtype=np.float32)
    xhat = np.empty((n, m), dtype=np.float32)
    rstd = np.empty(n, dtype=np.float32)
    cdef float[:, ::1] yv = y
    cdef float[:, ::1] hv = xhat
    cdef float[::1] rv = rstd
    cdef double mu, var, r, c, h
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            c = x[i, j] - mu
            var += c * c
        var /= m
        r = 1.0 / sqrt(var + eps)
        rv[i] = <float>r
        for j in range(m):
            h = (x[i, j] - mu) * r
            hv[i, j] = <float>h
            yv[i, j] = <float>(h * gain[j] + bias[j])
    return y, xhat, rstd


def layer_norm_backward(const float[:, ::1] dy, const float[:, ::1] xhat,
                        const float[::1] rstd, const float[::1] gain):
    cdef Py_ssize_t n = dy.shape[0], m = dy.shape[1], i, j
    dx = np.empty((n, m), dtype=np.float32)
    dg64 = np.zeros(m, dtype=np.float64)
    db64 = np.zeros(m, dtype=np.float64)
    cdef float[:, ::1] dxv = dx
    cdef double[::1] dg = dg64
    cdef double[::1] db = db64
    cdef double sg, sgx, g
    for i in range(n):
        sg = 0.0
        sgx = 0.0
        for j in range(m):
            dg[j] += <double>dy[i, j] * xhat[i, j]
            db[j] += dy[i, j]
            g = <double>dy[i, j] * gain[j]
            sg += g
            sgx += g * xhat[i, j]
        sg /= m
        sgx /= m
        for j in range(m):
            g = <double>dy[i, j] * gain[j]
            dxv[i, j] = <float>((g - sg - xhat[i, j] * sgx) * rstd[i])
    return dx, dg64.astype(np.float32), db64.astype(np.float32)


def gelu_forward(const float[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.float32)
    cdef float[:, ::1] o = out
    cdef double v
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            o[i, j] = <float>(0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v))))
    return out


def gelu_backward(const float[:, ::1] x, const float[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.float32)
    cdef float[:, ::1] o = out
    cdef double v, t, dt
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            t = tanh(GELU_C * (v + GELU_A * v * v * v))
            dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            o[i, j] = <float>((0.5 * (1.0 + t) + 0.5 * v * dt) * dy[i, j])
    return out


def int8_scores(const int8_t[:, ::1] qq, const int8_t[:, ::1] qd,
                const double[::1] scale_sq):
    cdef Py_ssize_t nq = qq.shape[0], nd = qd.shape[0], k = qq.shape[1], i, r, j
    out = np.empty((nq, nd), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double s
    for i in range(nq):
        for r in range(nd):
            s = 0.0
            for j in range(k):
                s += <double>(<int>qq[i, j] * <int>qd[r, j]) * scale_sq[j]
            o[i, r] = s
    return out


def binary_scores(const uint8_t[:, ::1] pq, const uint8_t[:, ::1] pd, int64_t dim):
    cdef Py_ssize_t nq = pq.shape[0], nd = pd.shape[0], nb = pq.shape[1], i, r, j
    out = np.empty((nq, nd), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    cdef int64_t ham
    for i in range(nq):
        for r in range(nd):
            ham = 0
            for j in range(nb):
                ham += __builtin_popcount(pq[i, j] ^ pd[r, j])
            o[i, r] = dim - 2 * ham
    return out

