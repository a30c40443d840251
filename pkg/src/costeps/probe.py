"""Analysis and intervention toolkit for the toy video DiT.

Everything here works on :class:`~costeps.flowmatch.SampleTrace` objects and
hook captures: linear CKA between decoded states, per-token activation
energy, noise interventions, layer swapping, and the multi-seed latent
ensemble.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .flowmatch import Conditioning, Intervention, Schedule, SampleTrace, example_seeds, sample_iter
from .model import Exchange, GroupAverage, HiddenState, HookRegistry, Replace
from .tensor import Rng, derive_seed


class ProbeError(ValueError):
    pass


class EnsembleError(RuntimeError):
    pass


# --- CKA ---------------------------------------------------------------------


def _hsic(a: np.ndarray, b: np.ndarray) -> float:
    m = b.T @ a
    return float(np.sum(m * m))


def linear_cka(x, y) -> float:
    """Linear CKA between ``(n, d1)`` and ``(n, d2)`` representations.

    Columns are centred; the computation is in float64. Returns 0 when either
    centred matrix is identically zero.
    """
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, T.Tensor) else y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ProbeError(f"need (n, d) matrices with equal n, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ProbeError("linear CKA needs at least two rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    if not xc.any() or not yc.any():
        return 0.0
    denom = np.sqrt(_hsic(xc, xc) * _hsic(yc, yc))
    if denom == 0:
        return 0.0
    return _hsic(xc, yc) / denom


def _rows(state: np.ndarray) -> np.ndarray:
    """Flatten one example's ``(F, H, W, C)`` or ``(N, D)`` state to tokens x channels."""
    return state.reshape(-1, state.shape[-1])


@dataclass
class CkaMatrix:
    values: np.ndarray  # (n_injection, n_measure) dissimilarities
    injection_steps: list[int]
    measure_steps: list[int]
    representation: str = "x0_hat"
    count: int = 1

    def to_json(self) -> dict:
        return {
            "values": self.values.tolist(),
            "injection_steps": list(self.injection_steps),
            "measure_steps": list(self.measure_steps),
            "representation": self.representation,
            "count": self.count,
            "axes": ["injection_step", "measure_step"],
        }


def _representation(trace: SampleTrace, step: int, representation: str, layer: int | None):
    if representation == "x0_hat":
        return trace.x0_hats[step]
    if representation == "hidden":
        return trace.hooks.get(step, layer).tokens
    raise ProbeError(f"unknown representation {representation!r}")


def cka_matrix(
    clean: SampleTrace,
    perturbed: Sequence[SampleTrace],
    injection_steps: Sequence[int],
    representation: str = "x0_hat",
    layer: int | None = None,
) -> CkaMatrix:
    """Entry ``(i, j)``: mean over the batch of ``1 - CKA`` between clean and
    perturbed-at-step-``i`` representations at measure step ``j``."""
    if len(perturbed) != len(injection_steps):
        raise ProbeError("need one perturbed run per injection step")
    n = clean.schedule.n_steps
    for p in perturbed:
        if p.schedule != clean.schedule or p.seeds != clean.seeds:
            raise ProbeError("clean and perturbed runs must share schedule and seeds")
    batch = clean.x0_hats[0].shape[0]
    out = np.zeros((len(perturbed), n))
    for i, p in enumerate(perturbed):
        for j in range(n):
            a = _representation(clean, j, representation, layer)
            b = _representation(p, j, representation, layer)
            vals = [0.0 if np.array_equal(a[k], b[k]) else 1.0 - linear_cka(_rows(a[k]), _rows(b[k])) for k in range(batch)]
            out[i, j] = float(np.mean(np.clip(vals, 0.0, 1.0)))
    return CkaMatrix(out, list(injection_steps), list(range(n)), representation, batch)


# --- energy ------------------------------------------------------------------


@dataclass
class EnergyMap:
    values: np.ndarray  # (layers, f, h, w)
    layers: list[int]
    step: int

    def tiled(self) -> np.ndarray:
        """``(layers * h, f * w)`` matrix: one row band per layer, frames left to right."""
        l, f, h, w = self.values.shape
        return self.values.transpose(0, 2, 1, 3).reshape(l * h, f * w)


def energy_map(states: Sequence[HiddenState], batch_index: int = 0) -> EnergyMap:
    """Per-token L2 norm over channels, re-spatialised to ``(f, h, w)`` per layer."""
    if not states:
        raise ProbeError("no captured hidden states")
    steps = {s.step for s in states}
    if len(steps) != 1:
        raise ProbeError(f"energy map expects one step, got {sorted(steps)}")
    maps = []
    for st in sorted(states, key=lambda s: s.layer):
        grid = st.spatial()  # raises on N != f*h*w
        norm = T.reduce_l2(T.Tensor(np.ascontiguousarray(grid[batch_index])), axis=-1)
        maps.append(norm.data)
    return EnergyMap(np.stack(maps), sorted(s.layer for s in states), steps.pop())


# --- interventions -----------------------------------------------------------


def _noise(seed: int, example_seed: int, step: int, shape, dtype) -> np.ndarray:
    return T.gaussian(Rng(derive_seed(seed, example_seed, step)), shape, dtype).data


@dataclass
class NoiseAtStep(Intervention):
    """Replace the whole latent with fresh N(0, I) right before step ``step``.

    ``step == n_steps`` is accepted and never fires: no evaluation follows.
    ``scaled`` multiplies the noise by the current noise level ``s``.
    ``clamp_condition=False`` leaves the conditioning frames noisy for that
    one evaluation.
    """

    step: int
    seed: int = 0
    scaled: bool = False
    clamp_condition: bool = True
    s_values: np.ndarray | None = field(default=None, repr=False)

    def validate(self, n_steps, n_frames, layers):
        if not 0 <= self.step <= n_steps:
            raise ProbeError(f"noise step {self.step} outside [0, {n_steps}]")
        self.s_values = Schedule(n_steps).s_values

    def pre_step(self, step, x, seeds):
        if step != self.step:
            return x
        out = np.stack([_noise(self.seed, s, step, x.shape[1:], x.dtype) for s in seeds])
        if self.scaled:
            out *= x.dtype.type(self.s_values[step])
        return out

    def clamps(self, step):
        return self.clamp_condition or step != self.step

    def describe(self):
        return {"type": "NoiseAtStep", "step": self.step, "seed": self.seed, "scaled": self.scaled}


@dataclass
class NoiseAtFrame(Intervention):
    """Replace one frame with fresh N(0, I) before every model evaluation."""

    frame: int
    seed: int = 0
    allow_condition: bool = False

    def validate(self, n_steps, n_frames, layers):
        if not 0 <= self.frame < n_frames:
            raise ProbeError(f"frame {self.frame} outside [0, {n_frames})")
        if self.frame == 0 and not self.allow_condition:
            raise ProbeError("frame 0 is the conditioning frame; pass allow_condition=True to target it")

    def pre_step(self, step, x, seeds):
        x = x.copy()
        for b, s in enumerate(seeds):
            x[b, self.frame] = _noise(self.seed, s, step, x.shape[2:], x.dtype)
        return x

    def describe(self):
        return {"type": "NoiseAtFrame", "frame": self.frame, "seed": self.seed}


@dataclass
class LayerSwap(Intervention):
    step: int
    layer: int
    source: HiddenState

    def validate(self, n_steps, n_frames, layers):
        if not 0 <= self.step < n_steps or (layers is not None and not 0 <= self.layer < layers):
            raise ProbeError(f"swap slot ({self.step}, {self.layer}) out of range")

    def install(self, hooks):
        hooks.inject(self.step, self.layer, Replace(self.source.tokens))

    def describe(self):
        return {"type": "LayerSwap", "step": self.step, "layer": self.layer}


@dataclass
class EnsembleAverage(Intervention):
    steps: tuple[int, ...]
    layers: tuple[int, ...]
    group: str = "ensemble"

    def validate(self, n_steps, n_frames, layers):
        if any(not 0 <= s < n_steps for s in self.steps):
            raise ProbeError(f"ensemble steps {self.steps} outside [0, {n_steps})")
        if layers is not None and any(not 0 <= l < layers for l in self.layers):
            raise ProbeError(f"ensemble layers {self.layers} outside [0, {layers})")

    def install(self, hooks):
        for s in self.steps:
            for l in self.layers:
                hooks.inject(s, l, GroupAverage(self.group))

    def describe(self):
        return {"type": "EnsembleAverage", "steps": list(self.steps), "layers": list(self.layers)}


def apply_noise_at_step(step: int, seed: int = 0, **kw) -> NoiseAtStep:
    return NoiseAtStep(step, seed, **kw)


def apply_noise_at_frame(frame: int, seed: int = 0, **kw) -> NoiseAtFrame:
    return NoiseAtFrame(frame, seed, **kw)


# --- layer swap --------------------------------------------------------------


@dataclass
class SwapResult:
    outputs: np.ndarray  # swapped-A final videos (B, F, H, W, C)
    flips: list[bool]
    trace: SampleTrace
    source: SampleTrace


def conditioning_for(instances) -> Conditioning:
    return Conditioning(
        np.stack([i.condition for i in instances]),
        np.array([i.family_id for i in instances], dtype=np.int64),
        instances[0].frames,
    )


def flipped(video: np.ndarray, inst_a, inst_b) -> bool:
    """Swapped-A outcome matches B's solution rather than A's (final agent cell)."""
    from .tasks import decode_positions

    if inst_a.family != "maze":
        raise ProbeError("flip detection is defined for maze pairs")
    final = decode_positions(video)[-1]
    return final == tuple(inst_b.spec.goal) and final != tuple(inst_a.spec.goal)


def layer_swap(model, instances_a, instances_b, step: int, layer: int, seeds, schedule: Schedule | None = None, source=None) -> SwapResult:
    """Run B with a capture at (step, layer), then A with that capture injected."""
    schedule = schedule or Schedule()
    for a, b in zip(instances_a, instances_b):
        if a.target.shape != b.target.shape:
            raise ProbeError(f"paired instances differ in shape: {a.target.shape} vs {b.target.shape}")
    if source is None:
        hooks_b = HookRegistry().capture([step], [layer])
        source = _run(model, conditioning_for(instances_b), seeds, schedule, hooks_b)
    captured = source.hooks.get(step, layer)
    trace = _run(model, conditioning_for(instances_a), seeds, schedule, None, [LayerSwap(step, layer, captured)])
    flips = [flipped(trace.final[k], a, b) for k, (a, b) in enumerate(zip(instances_a, instances_b))]
    return SwapResult(trace.final, flips, trace, source)


def swap_sweep(model, instances_a, instances_b, step: int, seeds, schedule: Schedule | None = None) -> list[float]:
    """Flip rate per layer for swaps at ``step``."""
    schedule = schedule or Schedule()
    layers = range(model.config.layers)
    hooks_b = HookRegistry().capture([step], layers)
    source = _run(model, conditioning_for(instances_b), seeds, schedule, hooks_b)
    rates = []
    for l in layers:
        res = layer_swap(model, instances_a, instances_b, step, l, seeds, schedule, source=source)
        rates.append(float(np.mean(res.flips)))
    return rates


def _run(model, cond, seeds, schedule, hooks=None, interventions=()) -> SampleTrace:
    from .flowmatch import euler_sample

    return euler_sample(model, cond, seeds, schedule, hooks, interventions)


# --- ensemble ----------------------------------------------------------------


def paper_window(first: int, last: int, layers: int, reference_layers: int = 40) -> tuple[int, int]:
    """Map an inclusive layer window of a ``reference_layers``-deep model onto ``layers``."""
    lo = first * layers // reference_layers
    hi = (last + 1) * layers // reference_layers - 1
    return lo, max(lo, hi)


@dataclass
class EnsembleConfig:
    k: int = 3
    layer_window: tuple[int, int] = (6, 8)
    step_window: tuple[int, ...] = (0,)
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        self.layer_window = tuple(self.layer_window)
        self.step_window = tuple(self.step_window)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.k < 1:
            raise ProbeError("ensemble needs k >= 1")
        if len(self.seeds) != self.k:
            raise ProbeError(f"{len(self.seeds)} seeds for k={self.k}")
        lo, hi = self.layer_window
        if lo > hi or lo < 0:
            raise ProbeError(f"bad layer window {self.layer_window}")

    @property
    def layers(self) -> tuple[int, ...]:
        lo, hi = self.layer_window
        return tuple(range(lo, hi + 1))


def group_mean(values: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean in fixed order, written as ``v0 + sum(vk - v0) / K``.

    The offset form makes a group of identical tensors return ``v0`` exactly.
    """
    base = values[0].astype(np.float64)
    acc = np.zeros_like(base)
    for v in values[1:]:
        acc += v.astype(np.float64) - base
    return (base + acc / len(values)).astype(values[0].dtype)


@dataclass
class EnsembleResult:
    traces: list[SampleTrace]
    scores: np.ndarray | None = None  # (K, B) per-seed totals

    @property
    def mean_scores(self) -> np.ndarray:
        return self.scores.mean(axis=0)


class _Done:
    def __init__(self, value):
        self.value = value


def _advance(gen, value=None):
    try:
        return gen.send(value)
    except StopIteration as stop:
        return _Done(stop.value)


def _lockstep(gens) -> list[SampleTrace]:
    msgs = [_advance(g) for g in gens]
    while True:
        if all(isinstance(m, _Done) for m in msgs):
            return [m.value for m in msgs]
        if any(isinstance(m, _Done) for m in msgs):
            raise EnsembleError("ensemble runs diverged: some finished while others wait at a barrier")
        keys = {(m.step, m.layer, m.group) for m in msgs}
        if len(keys) != 1:
            raise EnsembleError(f"ensemble runs diverged at slots {sorted(keys)}")
        shapes = {m.value.shape for m in msgs}
        if len(shapes) != 1:
            raise EnsembleError(f"ensemble hidden states differ in shape: {sorted(shapes)}")
        mean = group_mean([m.value for m in msgs])
        msgs = [_advance(g, mean) for g in gens]


class _Rendezvous:
    def __init__(self, k: int, timeout: float):
        self.slots: list = [None] * k
        self.results: dict = {}
        self.error: str | None = None
        self.barrier = threading.Barrier(k, action=self._reduce, timeout=timeout)

    def _reduce(self):
        keys = {(m.step, m.layer, m.group) for m in self.slots}
        if len(keys) != 1 or len({m.value.shape for m in self.slots}) != 1:
            self.error = f"ensemble runs diverged at slots {sorted(keys)}"
            return
        self.results[keys.pop()] = group_mean([m.value for m in self.slots])

    def exchange(self, idx: int, msg: Exchange) -> np.ndarray:
        self.slots[idx] = msg
        try:
            self.barrier.wait()
        except threading.BrokenBarrierError:
            raise EnsembleError("ensemble barrier timed out or was aborted") from None
        if self.error:
            raise EnsembleError(self.error)
        return self.results[(msg.step, msg.layer, msg.group)]


def _concurrent(gens, timeout: float) -> list[SampleTrace]:
    rv = _Rendezvous(len(gens), timeout)
    out: list = [None] * len(gens)
    errors: list = []

    def worker(k, gen):
        try:
            with T.no_grad():
                msg = _advance(gen)
                while not isinstance(msg, _Done):
                    msg = _advance(gen, rv.exchange(k, msg))
                out[k] = msg.value
            # a finished run can no longer meet the others at the barrier
            if rv.barrier.n_waiting:
                rv.barrier.abort()
        except BaseException as exc:  # noqa: BLE001
            errors.append(exc)
            rv.barrier.abort()

    threads = [threading.Thread(target=worker, args=(k, g)) for k, g in enumerate(gens)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        err = errors[0]
        raise err if isinstance(err, EnsembleError) else EnsembleError(str(err))
    return out


def ensemble_sample(
    model,
    cond: Conditioning,
    cfg: EnsembleConfig,
    schedule: Schedule | None = None,
    instances=None,
    concurrent: bool = False,
    timeout: float = 600.0,
    hooks: Sequence[HookRegistry] | None = None,
) -> EnsembleResult:
    """K lock-stepped runs whose block outputs are averaged inside the window.

    Run ``k`` uses per-example seeds ``example_seeds(cfg.seeds[k], B)``. Inside
    ``cfg.step_window`` x ``cfg.layer_window`` every run continues from the
    cross-seed mean of the block output; elsewhere runs are independent.
    """
    from .tasks import score

    schedule = schedule or Schedule()
    hooks = list(hooks) if hooks is not None else [HookRegistry() for _ in range(cfg.k)]
    if len(hooks) != cfg.k:
        raise ProbeError("need one hook registry per ensemble member")
    avg = EnsembleAverage(cfg.step_window, cfg.layers)
    gens = [
        sample_iter(model, cond, example_seeds(seed, cond.batch), schedule, hooks[k], [avg])
        for k, seed in enumerate(cfg.seeds)
    ]
    if concurrent:
        traces = _concurrent(gens, timeout)
    else:
        with T.no_grad():
            traces = _lockstep(gens)
    result = EnsembleResult(traces)
    if instances is not None:
        result.scores = np.array([[score(t.final[b], inst).total for b, inst in enumerate(instances)] for t in traces])
    return result


# --- sensitivity -------------------------------------------------------------


@dataclass
class SensitivityCurve:
    injection_steps: list[int]
    score_drop: list[float]
    final_dissimilarity: list[float]
    counts: list[int]

    @property
    def peak_step(self) -> int:
        return self.injection_steps[int(np.argmax(self.score_drop))]

    def to_json(self) -> dict:
        return {
            "injection_steps": self.injection_steps,
            "score_drop": self.score_drop,
            "final_dissimilarity": self.final_dissimilarity,
            "counts": self.counts,
            "peak_step": self.peak_step,
        }


def sensitivity_curve(clean_scores, sweep: dict, clean_trace: SampleTrace | None = None) -> SensitivityCurve:
    """Aligned per-injection-step curves from ``{step: (scores, trace)}``.

    Score drop is ``mean(clean - perturbed)``; dissimilarity is ``1 - CKA``
    between clean and perturbed decoded states at the last step.
    """
    if not sweep:
        raise ProbeError("empty perturbation sweep")
    clean_scores = np.asarray(clean_scores, dtype=np.float64)
    steps, drops, dissim, counts = [], [], [], []
    for step in sorted(sweep):
        scores, trace = sweep[step]
        scores = np.asarray(scores, dtype=np.float64)
        steps.append(int(step))
        drops.append(float(np.mean(clean_scores - scores)))
        counts.append(int(scores.size))
        if clean_trace is not None and trace is not None:
            a, b = clean_trace.x0_hats[-1], trace.x0_hats[-1]
            vals = [0.0 if np.array_equal(a[k], b[k]) else 1.0 - linear_cka(_rows(a[k]), _rows(b[k])) for k in range(a.shape[0])]
            dissim.append(float(np.mean(np.clip(vals, 0, 1))))
        else:
            dissim.append(float("nan"))
    return SensitivityCurve(steps, drops, dissim, counts)
