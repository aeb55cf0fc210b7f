# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same signatures as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs

cnp.import_array()

BACKEND = "cython"

cdef double GELU_K = 0.7978845608
cdef double GELU_C = 0.044715


cdef inline double _tanh(double u) nogil:
    # odd-symmetric form keeps exp() argument non-positive
    cdef double e
    if u >= 0:
        e = exp(-2.0 * u)
        return (1.0 - e) / (1.0 + e)
    e = exp(2.0 * u)
    return (e - 1.0) / (e + 1.0)


def gelu_fwd(x):
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(flat)
    cdef double[::1] xv = flat
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v
    for i in range(n):
        v = xv[i]
        ov[i] = 0.5 * v * (1.0 + _tanh(GELU_K * (v + GELU_C * v * v * v)))
    return out.reshape(np.shape(x))


def gelu_bwd(x, dy):
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[double, ndim=1] gflat = np.ascontiguousarray(dy, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(flat)
    cdef double[::1] xv = flat
    cdef double[::1] gv = gflat
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v, v2, t
    for i in range(n):
        v = xv[i]
        v2 = v * v
        t = _tanh(GELU_K * (v + GELU_C * v2 * v))
        ov[i] = gv[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v2))
    return out.reshape(np.shape(x))


def layernorm_fwd(x, gamma, beta, double eps):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] gv = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], i, j
    y = np.empty((n, d))
    xhat = np.empty((n, d))
    rstd = np.empty(n)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] hv = xhat
    cdef double[::1] rv = rstd
    cdef double mu, var, r, c
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += xv[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = xv[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        rv[i] = r
        for j in range(d):
            c = (xv[i, j] - mu) * r
            hv[i, j] = c
            yv[i, j] = c * gv[j] + bv[j]
    return y, xhat, rstd


def layernorm_bwd(dy, xhat, rstd, gamma):
    cdef double[:, ::1] dv = np.ascontiguousarray(dy, dtype=np.float64)
    cdef double[:, ::1] hv = np.ascontiguousarray(xhat, dtype=np.float64)
    cdef double[::1] rv = np.ascontiguousarray(rstd, dtype=np.float64)
    cdef double[::1] gv = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef Py_ssize_t n = dv.shape[0], d = dv.shape[1], i, j
    dx = np.empty((n, d))
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    cdef double[:, ::1] xv = dx
    cdef double[::1] dgv = dgamma
    cdef double[::1] dbv = dbeta
    cdef double m1, m2, g
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            g = dv[i, j] * gv[j]
            m1 += g
            m2 += g * hv[i, j]
            dgv[j] += dv[i, j] * hv[i, j]
            dbv[j] += dv[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xv[i, j] = (dv[i, j] * gv[j] - m1 - hv[i, j] * m2) * rv[i]
    return dx, dgamma, dbeta


def softmax_fwd(x):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], k = xv.shape[1], i, j
    y = np.empty((n, k))
    cdef double[:, ::1] yv = y
    cdef double m, s
    for i in range(n):
        m = xv[i, 0]
        for j in range(1, k):
            if xv[i, j] > m:
                m = xv[i, j]
        s = 0.0
        for j in range(k):
            yv[i, j] = exp(xv[i, j] - m)
            s += yv[i, j]
        for j in range(k):
            yv[i, j] /= s
    return y


def softmax_bwd(y, dy):
    cdef double[:, ::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[:, ::1] dv = np.ascontiguousarray(dy, dtype=np.float64)
    cdef Py_ssize_t n = yv.shape[0], k = yv.shape[1], i, j
    dx = np.empty((n, k))
    cdef double[:, ::1] ov = dx
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(k):
            s += dv[i, j] * yv[i, j]
        for j in range(k):
            ov[i, j] = yv[i, j] * (dv[i, j] - s)
    return dx


def huber_fwd(r, double beta):
    cdef double[::1] rv = np.ascontiguousarray(r, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t i, n = rv.shape[0]
    cdef double a, acc = 0.0
    for i in range(n):
        a = fabs(rv[i])
        if a <= beta:
            acc += 0.5 * rv[i] * rv[i]
        else:
            acc += beta * (a - 0.5 * beta)
    return acc / n


def huber_grad(r, double beta):
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(r, dtype=np.float64).reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] rv = flat
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = flat.shape[0]
    for i in range(n):
        if rv[i] > beta:
            ov[i] = beta
        elif rv[i] < -beta:
            ov[i] = -beta
        else:
            ov[i] = rv[i]
    return out.reshape(np.shape(r))


def window_counts(codes, centers, int radius, int n_codes):
    cdef signed char[:, ::1] cv = np.ascontiguousarray(codes, dtype=np.int8)
    cdef long long[:, ::1] ctr = np.ascontiguousarray(centers, dtype=np.int64)
    cdef Py_ssize_t rows = cv.shape[0], cols = cv.shape[1], n = ctr.shape[0]
    out = np.zeros((n, n_codes), dtype=np.int64)
    cdef long long[:, ::1] ov = out
    cdef Py_ssize_t i, r, c, rr, cc
    cdef int code
    for i in range(n):
        r = ctr[i, 0]
        c = ctr[i, 1]
        for rr in range(r - radius, r + radius + 1):
            if rr < 0 or rr >= rows:
                continue
            for cc in range(c - radius, c + radius + 1):
                if cc < 0 or cc >= cols or (rr == r and cc == c):
                    continue
                code = cv[rr, cc]
                if 0 <= code < n_codes:
                    ov[i, code] += 1
    return out
