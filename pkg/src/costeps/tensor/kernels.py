"""Backend selection for the row kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``COSTEPS_PURE_PYTHON=1`` forces the fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("COSTEPS_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward


def backends():
    """Return ``{name: module}`` for every backend importable in this build."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
