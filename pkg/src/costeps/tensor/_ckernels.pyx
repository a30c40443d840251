# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels for softmax, layer normalization and GELU.

All functions take C-contiguous 2-D arrays ``(rows, cols)`` and reduce along
the last axis. Summation order is fixed (left to right) so results are
deterministic for a given build.
"""
import numpy as np
cimport cython
from cython cimport floating
from libc.math cimport exp, expf, sqrt, sqrtf, tanh, tanhf

cdef double GELU_K = 0.7978845608028654  # sqrt(2 / pi)
cdef double GELU_C = 0.044715


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


cdef inline floating _tanh(floating x) noexcept nogil:
    if floating is float:
        return tanhf(x)
    else:
        return tanh(x)


cdef inline floating _sqrt(floating x) noexcept nogil:
    if floating is float:
        return sqrtf(x)
    else:
        return sqrt(x)


def softmax_forward(floating[:, ::1] x, floating[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef floating mx, total, e
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            total = 0
            for j in range(m):
                e = _exp(x[i, j] - mx)
                out[i, j] = e
                total = total + e
            total = 1 / total
            for j in range(m):
                out[i, j] = out[i, j] * total


def softmax_backward(floating[:, ::1] y, floating[:, ::1] gy, floating[:, ::1] gx):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef floating dot
    with nogil:
        for i in range(n):
            dot = 0
            for j in range(m):
                dot = dot + gy[i, j] * y[i, j]
            for j in range(m):
                gx[i, j] = y[i, j] * (gy[i, j] - dot)


def layernorm_forward(floating[:, ::1] x, floating[:, ::1] out, floating[::1] rstd, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef floating mean, var, d, r
    with nogil:
        for i in range(n):
            mean = 0
            for j in range(m):
                mean = mean + x[i, j]
            mean = mean / m
            var = 0
            for j in range(m):
                d = x[i, j] - mean
                var = var + d * d
            var = var / m
            r = 1 / _sqrt(var + <floating>eps)
            rstd[i] = r
            for j in range(m):
                out[i, j] = (x[i, j] - mean) * r


def layernorm_backward(floating[:, ::1] xhat, floating[::1] rstd, floating[:, ::1] gy,
                       floating[:, ::1] gx):
    cdef Py_ssize_t n = xhat.shape[0], m = xhat.shape[1], i, j
    cdef floating mg, mgx
    with nogil:
        for i in range(n):
            mg = 0
            mgx = 0
            for j in range(m):
                mg = mg + gy[i, j]
                mgx = mgx + gy[i, j] * xhat[i, j]
            mg = mg / m
            mgx = mgx / m
            for j in range(m):
                gx[i, j] = rstd[i] * (gy[i, j] - mg - xhat[i, j] * mgx)


def gelu_forward(floating[::1] x, floating[::1] out):
    cdef Py_ssize_t n = x.shape[0], i
    cdef floating v, t
    with nogil:
        for i in range(n):
            v = x[i]
            t = _tanh(<floating>GELU_K * (v + <floating>GELU_C * v * v * v))
            out[i] = <floating>0.5 * v * (1 + t)


def gelu_backward(floating[::1] x, floating[::1] gy, floating[::1] gx):
    cdef Py_ssize_t n = x.shape[0], i
    cdef floating v, t, dt
    with nogil:
        for i in range(n):
            v = x[i]
            t = _tanh(<floating>GELU_K * (v + <floating>GELU_C * v * v * v))
            dt = (1 - t * t) * <floating>GELU_K * (1 + 3 * <floating>GELU_C * v * v)
            gx[i] = gy[i] * (<floating>0.5 * (1 + t) + <floating>0.5 * v * dt)
