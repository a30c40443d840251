from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, backward, mul, sum as tsum


def _project(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1 and weights is None:
        return tsum(out)
    return tsum(mul(out, Tensor(weights)))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between backward gradients and central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output coordinate contributes. ``inputs`` are perturbed in place and
    restored. Returns ``max |a - n| / max(|a|, |n|, 1e-8)`` over all input
    coordinates.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    weights = None
    if out.size != 1:
        weights = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
    loss = _project(out, weights)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("non-finite output in grad_check")
    backward(loss)

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(analytic).all():
            raise NonFiniteError("non-finite analytic gradient")
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _project(fn(*inputs), weights).item()
            flat[i] = orig - h
            fm = _project(fn(*inputs), weights).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * h)
        if not np.isfinite(numeric).all():
            raise NonFiniteError("non-finite numeric gradient")
        a = analytic.reshape(-1).astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
