"""Pure-numpy versions of the compiled row kernels.

Signatures mirror ``_ckernels``: outputs are written into caller-provided
arrays so the two backends are interchangeable.
"""
from __future__ import annotations

import numpy as np

GELU_K = 0.7978845608028654
GELU_C = 0.044715


def softmax_forward(x, out):
    np.subtract(x, x.max(axis=-1, keepdims=True), out=out)
    np.exp(out, out=out)
    out *= 1 / out.sum(axis=-1, keepdims=True)


def softmax_backward(y, gy, gx):
    dot = (gy * y).sum(axis=-1, keepdims=True)
    np.subtract(gy, dot, out=gx)
    gx *= y


def layernorm_forward(x, out, rstd, eps):
    mean = x.mean(axis=-1, keepdims=True)
    np.subtract(x, mean, out=out)
    var = (out * out).mean(axis=-1)
    rstd[...] = 1 / np.sqrt(var + x.dtype.type(eps))
    out *= rstd[:, None]


def layernorm_backward(xhat, rstd, gy, gx):
    mg = gy.mean(axis=-1, keepdims=True)
    mgx = (gy * xhat).mean(axis=-1, keepdims=True)
    np.subtract(gy, mg, out=gx)
    gx -= xhat * mgx
    gx *= rstd[:, None]


def gelu_forward(x, out):
    dt = x.dtype.type
    t = np.tanh(dt(GELU_K) * (x + dt(GELU_C) * x * x * x))
    np.multiply(dt(0.5) * x, 1 + t, out=out)


def gelu_backward(x, gy, gx):
    dt = x.dtype.type
    t = np.tanh(dt(GELU_K) * (x + dt(GELU_C) * x * x * x))
    d = (1 - t * t) * dt(GELU_K) * (1 + 3 * dt(GELU_C) * x * x)
    np.multiply(gy, dt(0.5) * (1 + t) + dt(0.5) * x * d, out=gx)
