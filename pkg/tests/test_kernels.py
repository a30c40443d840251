from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from costeps.tensor import kernels

BACKENDS = kernels.backends()
compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")

rows = st.tuples(st.integers(1, 6), st.integers(1, 40))
finite = st.floats(-20, 20, allow_nan=False, width=64)


@compiled
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
@given(data=st.data())
def test_softmax_backends_agree(dtype, tol, data):
    shape = data.draw(rows)
    x = data.draw(arrays(np.float64, shape, elements=finite)).astype(dtype)
    gy = data.draw(arrays(np.float64, shape, elements=finite)).astype(dtype)
    outs = {}
    for name, mod in BACKENDS.items():
        y, gx = np.empty_like(x), np.empty_like(x)
        mod.softmax_forward(x, y)
        mod.softmax_backward(y, gy, gx)
        outs[name] = (y, gx)
    np.testing.assert_allclose(outs["cython"][0], outs["python"][0], atol=tol)
    np.testing.assert_allclose(outs["cython"][1], outs["python"][1], atol=tol * 40)


@compiled
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-9), (np.float32, 1e-3)])
@given(data=st.data())
def test_layernorm_backends_agree(dtype, tol, data):
    shape = data.draw(rows)
    x = data.draw(arrays(np.float64, shape, elements=finite)).astype(dtype)
    gy = data.draw(arrays(np.float64, shape, elements=finite)).astype(dtype)
    outs = {}
    for name, mod in BACKENDS.items():
        y, gx, rstd = np.empty_like(x), np.empty_like(x), np.empty(shape[0], dtype=dtype)
        mod.layernorm_forward(x, y, rstd, 1e-5)
        mod.layernorm_backward(y, rstd, gy, gx)
        outs[name] = (y, gx, rstd)
    for a, b in zip(outs["cython"], outs["python"]):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


@compiled
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
@given(x=arrays(np.float64, st.integers(1, 64), elements=finite))
def test_gelu_backends_agree(dtype, tol, x):
    x = x.astype(dtype)
    gy = np.linspace(-1, 1, x.size).astype(dtype)
    outs = {}
    for name, mod in BACKENDS.items():
        y, gx = np.empty_like(x), np.empty_like(x)
        mod.gelu_forward(x, y)
        mod.gelu_backward(x, gy, gx)
        outs[name] = (y, gx)
    for a, b in zip(outs["cython"], outs["python"]):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol * 20)


def test_env_var_forces_python_backend():
    env = dict(os.environ, COSTEPS_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from costeps.tensor import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


def test_selected_backend_is_reported():
    assert kernels.BACKEND in BACKENDS
