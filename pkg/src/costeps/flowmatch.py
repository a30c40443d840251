"""Linear-path flow matching: objective, schedule and Euler sampler.

Data ``x0`` and noise ``x1`` are joined by ``x_s = (1 - s) x0 + s x1`` with
velocity ``x1 - x0``. The noise scale along this path is ``sigma(s) = s``, so
the clean state implied by a velocity prediction is ``x_s - s * v``.

The sampler integrates from ``s = 1`` to ``s = 0`` on a uniform grid. At
every step it applies the pre-step interventions, re-clamps the
conditioning frames, evaluates the model, records the decoded estimate and
takes one Euler step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import HookRegistry, drive, patchify
from .tensor import NonFiniteError, Rng, Tensor, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    n_steps: int = 20

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def s_values(self) -> np.ndarray:
        return np.linspace(1.0, 0.0, self.n_steps + 1)

    @staticmethod
    def sigma(s):
        return s


def _same_shape(a, b, name):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _check_s(s):
    if not 0.0 <= float(s) <= 1.0:
        raise ValueError(f"s must lie in [0, 1], got {s}")


def interpolate(x0, x1, s: float):
    _same_shape(x0, x1, "interpolate")
    _check_s(s)
    if isinstance(x0, Tensor) or isinstance(x1, Tensor):
        x0, x1 = T.tensor(x0), T.tensor(x1)
        return T.add(T.scale(x0, 1.0 - s), T.scale(x1, s))
    dt = np.result_type(x0, x1).type
    return dt(1.0 - s) * x0 + dt(s) * x1


def velocity_target(x0, x1):
    _same_shape(x0, x1, "velocity_target")
    if isinstance(x0, Tensor) or isinstance(x1, Tensor):
        return T.sub(T.tensor(x1), T.tensor(x0))
    return x1 - x0


def estimate_x0(x_s, v_hat, s: float):
    _same_shape(x_s, v_hat, "estimate_x0")
    _check_s(s)
    sig = Schedule.sigma(s)
    if isinstance(x_s, Tensor) or isinstance(v_hat, Tensor):
        return T.sub(T.tensor(x_s), T.scale(T.tensor(v_hat), sig))
    return x_s - np.result_type(x_s, v_hat).type(sig) * v_hat


# --- training ---------------------------------------------------------------


def clamp(x: np.ndarray, cond: np.ndarray | None) -> np.ndarray:
    """Overwrite the leading frames of ``x`` (B, F, ...) with ``cond`` (B, k, ...)."""
    if cond is None or cond.shape[1] == 0:
        return x
    x = x.copy()
    x[:, : cond.shape[1]] = cond
    return x


def flow_loss(model, x0: np.ndarray, x1: np.ndarray, s: np.ndarray, family, n_cond: int = 1) -> Tensor:
    """Mean squared velocity error. Clamped frames have target velocity zero."""
    s = np.asarray(s, dtype=np.float64)
    dt = x0.dtype.type
    sb = s.reshape(-1, 1, 1, 1, 1).astype(x0.dtype)
    x_s = (1 - sb) * x0 + sb * x1
    target = x1 - x0
    if n_cond:
        x_s[:, :n_cond] = x0[:, :n_cond]
        target[:, :n_cond] = dt(0)
    v = model.velocity_tokens(x_s, s, family)
    tgt, _ = patchify(target, model.config.patch)
    diff = T.sub(v, Tensor(tgt))
    return T.mean(T.mul(diff, diff))


@dataclass
class TrainBatch:
    x0: np.ndarray  # (B, F, H, W, C)
    family: np.ndarray  # (B,)
    n_cond: int = 1


def train_step(model, batch: TrainBatch, rng: Rng, opt, cond_dropout: float = 0.0) -> float:
    """One Adam step on the flow-matching objective; returns the batch loss."""
    b = batch.x0.shape[0]
    x1 = rng.normal(batch.x0.size).reshape(batch.x0.shape).astype(batch.x0.dtype)
    s = rng.uniform(b)
    family = np.array(batch.family, dtype=np.int64)
    if cond_dropout > 0:
        family = np.where(rng.uniform(b) < cond_dropout, 0, family)
    opt.zero_grad()
    loss = flow_loss(model, batch.x0, x1, s, family, batch.n_cond)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite training loss at optimizer step {opt.state.step_count + 1}")
    T.backward(loss)
    opt.step()
    return value


# --- sampling ---------------------------------------------------------------


@dataclass
class Conditioning:
    frames: np.ndarray  # (B, k, H, W, C) clean conditioning frames
    family: np.ndarray  # (B,)
    n_frames: int  # total frames F of the generated video

    @property
    def batch(self) -> int:
        return self.frames.shape[0]

    @property
    def video_shape(self) -> tuple[int, ...]:
        _, _, h, w, c = self.frames.shape
        return (self.batch, self.n_frames, h, w, c)


class Intervention:
    """Base class for sampler plug-ins. Subclasses override what they need."""

    def validate(self, n_steps: int, n_frames: int, layers: int | None) -> None:
        pass

    def install(self, hooks: HookRegistry) -> None:
        pass

    def pre_step(self, step: int, x: np.ndarray, seeds: Sequence[int]) -> np.ndarray:
        return x

    def clamps(self, step: int) -> bool:
        """Whether the conditioning clamp applies before evaluation ``step``."""
        return True

    def describe(self) -> dict:
        return {"type": type(self).__name__}


class VelocityField:
    """Adapt a plain ``fn(x, s) -> v`` into a sampler-compatible model."""

    def __init__(self, fn: Callable[[np.ndarray, float], np.ndarray]):
        self.fn = fn

    def velocity_iter(self, x, s, family, hooks=None, step=0):
        return self.fn(x, s)
        yield  # pragma: no cover


@dataclass
class SampleTrace:
    seeds: list[int]
    schedule: Schedule
    xs: list[np.ndarray] = field(default_factory=list)  # n_steps + 1 states
    x0_hats: list[np.ndarray] = field(default_factory=list)  # n_steps estimates
    velocities: list[np.ndarray] = field(default_factory=list)
    interventions: list[dict] = field(default_factory=list)
    hooks: HookRegistry | None = None

    @property
    def final(self) -> np.ndarray:
        return self.xs[-1]

    def equals(self, other: "SampleTrace") -> bool:
        """Bit-identical states, estimates and velocities."""
        pairs = zip(self.xs + self.x0_hats + self.velocities, other.xs + other.x0_hats + other.velocities)
        return (
            len(self.xs) == len(other.xs)
            and len(self.x0_hats) == len(other.x0_hats)
            and all(np.array_equal(a, b) for a, b in pairs)
        )


def initial_noise(seeds: Sequence[int], shape, dtype=np.float32) -> np.ndarray:
    """Stack one Gaussian draw of ``shape`` (without batch) per seed."""
    return np.stack([T.gaussian(Rng(s), shape, dtype).data for s in seeds])


def sample_iter(model, cond: Conditioning, seeds, schedule: Schedule, hooks=None, interventions=(), fork=None):
    """Generator form of :func:`euler_sample`; yields hook exchanges upward.

    ``fork=(trace, k)`` reuses the first ``k`` steps of an earlier run with the
    same seeds and schedule instead of recomputing them. The result is
    bit-identical to a full run as long as nothing acts before step ``k``.
    Hook captures only cover steps ``>= k``.
    """
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    if len(seeds) != cond.batch:
        raise ValueError(f"{len(seeds)} seeds for a batch of {cond.batch}")
    n = schedule.n_steps
    layers = getattr(getattr(model, "config", None), "layers", None)
    hooks = hooks if hooks is not None else (HookRegistry() if layers is not None else None)
    for iv in interventions:
        iv.validate(n, cond.n_frames, layers)
        if hooks is not None:
            iv.install(hooks)
    if hooks is not None and layers is not None:
        hooks.validate(layers, n)
    dtype = np.dtype(getattr(getattr(model, "config", None), "dtype", "float32"))
    cond_frames = cond.frames.astype(dtype, copy=False)
    trace = SampleTrace(seeds, schedule, interventions=[iv.describe() for iv in interventions], hooks=hooks)
    x = initial_noise(seeds, cond.video_shape[1:], dtype)
    s_vals = schedule.s_values
    start = 0
    if fork is not None:
        prev, start = fork
        if prev.seeds != seeds or prev.schedule != schedule or not 0 <= start <= n:
            raise ValueError("fork needs a trace with the same seeds and schedule and 0 <= k <= n_steps")
        trace.xs = list(prev.xs[:start])
        trace.x0_hats = list(prev.x0_hats[:start])
        trace.velocities = list(prev.velocities[:start])
        if start > 0:
            x = prev.xs[start - 1] + dtype.type(s_vals[start] - s_vals[start - 1]) * prev.velocities[start - 1]
    for i in range(start, n):
        s = float(s_vals[i])
        for iv in interventions:
            x = iv.pre_step(i, x, seeds)
        if all(iv.clamps(i) for iv in interventions):
            x = clamp(x, cond_frames)
        trace.xs.append(x)
        v = yield from model.velocity_iter(x, s, cond.family, hooks, i)
        v = np.asarray(v, dtype=dtype)
        if not np.isfinite(v).all():
            raise NonFiniteError(f"non-finite velocity at step {i}")
        trace.velocities.append(v)
        trace.x0_hats.append(estimate_x0(x, v, s))
        x = x + dtype.type(s_vals[i + 1] - s_vals[i]) * v
    x = clamp(x, cond_frames)
    if not np.isfinite(x).all():
        raise NonFiniteError("non-finite final state")
    trace.xs.append(x)
    return trace


def euler_sample(model, cond: Conditioning, seeds, schedule: Schedule | None = None, hooks=None, interventions=(), fork=None):
    """Integrate the velocity field from noise to data; returns a :class:`SampleTrace`."""
    with T.no_grad():
        return drive(sample_iter(model, cond, seeds, schedule or Schedule(), hooks, interventions, fork))


def example_seeds(base: int, count: int, offset: int = 0) -> list[int]:
    """Per-example noise seeds derived from a base seed."""
    return [derive_seed(base, offset + i) & 0x7FFFFFFFFFFFFFFF for i in range(count)]
