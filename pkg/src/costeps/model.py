"""Small diffusion transformer over spatiotemporal grid tokens.

Video tensors are laid out ``(B, F, H, W, C)``. Each patch of
``(pf, ph, pw)`` cells becomes one token, giving ``N = f*h*w`` tokens with
``f = F/pf`` and so on. Attention is full and bidirectional over all tokens.

Conditioning is a single vector per example (timestep embedding plus a task
family embedding) added to every token before the first block. Family index
0 is the null family used by the unconditional guidance branch.

Hidden states are observed and edited through a :class:`HookRegistry`.
Capture slots record the block output that the next block consumes (that
is, after any injection at the same slot). Injection rules replace a block
output. :class:`GroupAverage` rules are resolved by whoever drives
:meth:`DiT.forward_iter`: the generator yields an :class:`Exchange` and
expects the replacement array back.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor


class HookError(ValueError):
    pass


@dataclass
class ModelConfig:
    layers: int = 12
    dim: int = 128
    heads: int = 4
    patch: tuple[int, int, int] = (1, 1, 1)
    grid: tuple[int, int, int] = (8, 5, 5)
    channels: int = 4
    mlp_ratio: int = 2
    families: int = 3
    guidance_scale: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        self.grid = tuple(int(g) for g in self.grid)
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.dim % 2:
            raise ValueError("dim must be even for sinusoidal embeddings")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @property
    def tokens(self) -> int:
        f, h, w = self.grid
        return f * h * w

    @property
    def patch_dim(self) -> int:
        pf, ph, pw = self.patch
        return pf * ph * pw * self.channels

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        (f, h, w), (pf, ph, pw) = self.grid, self.patch
        return (f * pf, h * ph, w * pw, self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        d["grid"] = list(self.grid)
        return d


# --- patching ----------------------------------------------------------------


def patchify(video, patch=(1, 1, 1)):
    """``(B, F, H, W, C)`` -> ``(tokens (B, N, pf*ph*pw*C), grid (f, h, w))``."""
    arr = video.data if isinstance(video, Tensor) else np.asarray(video)
    if arr.ndim != 5:
        raise ValueError(f"expected (B, F, H, W, C), got {arr.shape}")
    b, F, H, W, C = arr.shape
    pf, ph, pw = patch
    if F % pf or H % ph or W % pw:
        raise ValueError(f"video extents {(F, H, W)} not divisible by patch {tuple(patch)}")
    f, h, w = F // pf, H // ph, W // pw
    x = arr.reshape(b, f, pf, h, ph, w, pw, C).transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return np.ascontiguousarray(x).reshape(b, f * h * w, pf * ph * pw * C), (f, h, w)


def unpatchify(tokens, grid, patch=(1, 1, 1)):
    arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    f, h, w = grid
    pf, ph, pw = patch
    b, n, d = arr.shape
    if n != f * h * w:
        raise ValueError(f"{n} tokens do not match grid {tuple(grid)}")
    if d % (pf * ph * pw):
        raise ValueError(f"token width {d} does not match patch {tuple(patch)}")
    C = d // (pf * ph * pw)
    x = arr.reshape(b, f, h, w, pf, ph, pw, C).transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return np.ascontiguousarray(x).reshape(b, f * pf, h * ph, w * pw, C)


# --- embeddings --------------------------------------------------------------


# Grid axes are at most a few cells long, so the positional encoding uses a
# much smaller frequency base than the timestep embedding. With 10000 most
# channels would be near-constant over 8 positions. The gain makes position
# dominate the freshly initialised token embedding, which lets attention
# learn "same cell, other frame" lookups within a few hundred steps.
POSITION_BASE = 20.0
POSITION_GAIN = 3.0


def sinusoid(positions: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """``[cos(p * f_k), sin(p * f_k)]`` with ``f_k = base^(-k / (dim/2))``."""
    half = dim // 2
    freqs = np.exp(-math.log(base) * np.arange(half) / half)
    args = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def position_encoding(grid, dim: int) -> np.ndarray:
    """Additive 3-D factorised sinusoidal encoding, ``(f*h*w, dim)``."""
    f, h, w = grid
    part = 2 * (dim // 6)
    last = dim - 2 * part
    ef = sinusoid(np.arange(f), part, POSITION_BASE)
    eh = sinusoid(np.arange(h), part, POSITION_BASE)
    ew = sinusoid(np.arange(w), last, POSITION_BASE)
    out = np.concatenate(
        [
            np.broadcast_to(ef[:, None, None, :], (f, h, w, part)),
            np.broadcast_to(eh[None, :, None, :], (f, h, w, part)),
            np.broadcast_to(ew[None, None, :, :], (f, h, w, last)),
        ],
        axis=-1,
    )
    return POSITION_GAIN * out.reshape(f * h * w, dim)


# --- hooks -------------------------------------------------------------------


@dataclass
class HiddenState:
    step: int
    layer: int
    tokens: np.ndarray  # (B, N, D)
    grid: tuple[int, int, int]

    def spatial(self) -> np.ndarray:
        """Re-spatialise to ``(B, f, h, w, D)``."""
        b, n, d = self.tokens.shape
        f, h, w = self.grid
        if n != f * h * w:
            raise ValueError(f"N={n} does not match grid {self.grid}")
        return self.tokens.reshape(b, f, h, w, d)


@dataclass(frozen=True)
class Replace:
    """Replace the block output with a fixed ``(B, N, D)`` array."""

    value: np.ndarray

    def __eq__(self, other):
        return isinstance(other, Replace) and np.array_equal(self.value, other.value)

    __hash__ = object.__hash__


@dataclass(frozen=True)
class GroupAverage:
    """Replace the block output with the mean over a group of lock-stepped runs."""

    group: str = "ensemble"


@dataclass
class Exchange:
    step: int
    layer: int
    group: str
    value: np.ndarray


@dataclass
class HookRegistry:
    captures: set = field(default_factory=set)
    injections: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)

    def capture(self, steps, layers) -> "HookRegistry":
        for s in steps:
            for l in layers:
                key = (int(s), int(l))
                if key in self.captures:
                    raise HookError(f"capture slot {key} already registered")
                if key[0] < 0 or key[1] < 0:
                    raise HookError(f"negative slot {key}")
                self.captures.add(key)
        return self

    def inject(self, step: int, layer: int, rule) -> "HookRegistry":
        key = (int(step), int(layer))
        if key in self.injections:
            raise HookError(f"slot {key} already has an injection rule")
        if key[0] < 0 or key[1] < 0:
            raise HookError(f"negative slot {key}")
        self.injections[key] = rule
        return self

    def validate(self, layers: int, n_steps: int | None = None) -> None:
        for s, l in list(self.captures) + list(self.injections):
            if l >= layers:
                raise HookError(f"hook slot ({s}, {l}) references layer >= {layers}")
            if n_steps is not None and s >= n_steps:
                raise HookError(f"hook slot ({s}, {l}) references step >= {n_steps}")

    def get(self, step: int, layer: int) -> HiddenState:
        return self.records[(step, layer)]

    def at_step(self, step: int) -> list[HiddenState]:
        return [self.records[k] for k in sorted(self.records) if k[0] == step]

    def clear_records(self) -> None:
        self.records.clear()


def register_capture(hooks: HookRegistry | None, steps, layers) -> HookRegistry:
    hooks = HookRegistry() if hooks is None else hooks
    return hooks.capture(steps, layers)


def inject_hidden(hooks: HookRegistry | None, step: int, layer: int, rule) -> HookRegistry:
    hooks = HookRegistry() if hooks is None else hooks
    return hooks.inject(step, layer, rule)


def drive(gen):
    """Run a forward generator standalone: group averages over a group of one."""
    try:
        msg = next(gen)
        while True:
            msg = gen.send(msg.value)
    except StopIteration as stop:
        return stop.value


# --- model -------------------------------------------------------------------


class DiT:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params: dict[str, Tensor] = {}
        self._init(Rng(seed))

    def _param(self, name, shape, std=None, fill=None):
        dt = np.dtype(self.config.dtype)
        if fill is not None:
            data = np.full(shape, fill, dtype=dt)
        else:
            data = (self._rng.normal(int(np.prod(shape))).reshape(shape) * std).astype(dt)
        self.params[name] = Tensor(data, requires_grad=True)

    def _init(self, rng: Rng):
        c = self.config
        d, hd = c.dim, c.dim * c.mlp_ratio
        self._rng = rng
        self._param("patch.w", (c.patch_dim, d), std=1 / math.sqrt(c.patch_dim))
        self._param("patch.b", (d,), fill=0.0)
        self._param("time.w1", (d, d), std=1 / math.sqrt(d))
        self._param("time.b1", (d,), fill=0.0)
        self._param("time.w2", (d, d), std=1 / math.sqrt(d))
        self._param("time.b2", (d,), fill=0.0)
        self._param("family", (c.families, d), std=0.5)
        for i in range(c.layers):
            p = f"blocks.{i}."
            self._param(p + "ln1.g", (d,), fill=1.0)
            self._param(p + "ln1.b", (d,), fill=0.0)
            for name in ("wq", "wk", "wv"):
                self._param(p + name, (d, d), std=1 / math.sqrt(d))
                self._param(p + "b" + name[1], (d,), fill=0.0)
            self._param(p + "wo", (d, d), std=0.5 / math.sqrt(d * c.layers))
            self._param(p + "bo", (d,), fill=0.0)
            self._param(p + "ln2.g", (d,), fill=1.0)
            self._param(p + "ln2.b", (d,), fill=0.0)
            self._param(p + "w1", (d, hd), std=1 / math.sqrt(d))
            self._param(p + "b1", (hd,), fill=0.0)
            self._param(p + "w2", (hd, d), std=0.5 / math.sqrt(hd * c.layers))
            self._param(p + "b2", (d,), fill=0.0)
        self._param("final.g", (d,), fill=1.0)
        self._param("final.b", (d,), fill=0.0)
        self._param("out.w", (d, c.patch_dim), std=0.02)
        self._param("out.b", (c.patch_dim,), fill=0.0)
        del self._rng

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- pieces ---------------------------------------------------------------

    def timestep_embed(self, s) -> Tensor:
        """Embedding of noise level(s) ``s`` in [0, 1]; returns ``(D,)`` or ``(B, D)``."""
        s_arr = np.asarray(s, dtype=np.float64)
        if np.any(s_arr < 0) or np.any(s_arr > 1) or not np.all(np.isfinite(s_arr)):
            raise ValueError(f"timestep must lie in [0, 1], got {s}")
        p = self.params
        base = Tensor(sinusoid(1000.0 * s_arr, self.config.dim).astype(self.config.dtype))
        squeeze = base.ndim == 1
        if squeeze:
            base = T.reshape(base, (1, -1))
        h = T.silu(T.add(T.matmul(base, p["time.w1"]), p["time.b1"]))
        out = T.add(T.matmul(h, p["time.w2"]), p["time.b2"])
        return T.reshape(out, (-1,)) if squeeze else out

    def _attention(self, x: Tensor, i: int) -> Tensor:
        c, p = self.config, self.params
        pre = f"blocks.{i}."
        b, n, d = x.shape
        nh, dh = c.heads, d // c.heads

        def split(t, order):
            t = T.transpose(T.reshape(t, (b, n, nh, dh)), order)
            return T.reshape(t, (b * nh,) + t.shape[2:])

        q = split(T.scale(T.linear(x, p[pre + "wq"], p[pre + "bq"]), 1 / math.sqrt(dh)), (0, 2, 1, 3))
        k_t = split(T.linear(x, p[pre + "wk"], p[pre + "bk"]), (0, 2, 3, 1))
        v = split(T.linear(x, p[pre + "wv"], p[pre + "bv"]), (0, 2, 1, 3))
        attn = T.softmax(T.bmm(q, k_t))
        o = T.bmm(attn, v)
        o = T.reshape(T.transpose(T.reshape(o, (b, nh, n, dh)), (0, 2, 1, 3)), (b, n, d))
        return T.linear(o, p[pre + "wo"], p[pre + "bo"])

    def block(self, x: Tensor, i: int) -> Tensor:
        p = self.params
        pre = f"blocks.{i}."
        h = T.add(T.mul(T.layer_norm(x), p[pre + "ln1.g"]), p[pre + "ln1.b"])
        x = T.add(x, self._attention(h, i))
        h = T.add(T.mul(T.layer_norm(x), p[pre + "ln2.g"]), p[pre + "ln2.b"])
        h = T.gelu(T.linear(h, p[pre + "w1"], p[pre + "b1"]))
        return T.add(x, T.linear(h, p[pre + "w2"], p[pre + "b2"]))

    def head(self, x: Tensor) -> Tensor:
        p = self.params
        h = T.add(T.mul(T.layer_norm(x), p["final.g"]), p["final.b"])
        return T.linear(h, p["out.w"], p["out.b"])

    def embed(self, tokens: np.ndarray, grid, s, family) -> Tensor:
        c = self.config
        b, n, _ = tokens.shape
        dt = np.dtype(c.dtype)
        x = T.linear(Tensor(tokens.astype(dt, copy=False)), self.params["patch.w"], self.params["patch.b"])
        x = T.add(x, Tensor(position_encoding(grid, c.dim).astype(dt)))
        s_arr = np.broadcast_to(np.asarray(s, dtype=np.float64), (b,))
        fam = np.broadcast_to(np.asarray(family, dtype=np.int64), (b,))
        cond = T.add(self.timestep_embed(s_arr), T.take(self.params["family"], fam))
        return T.add(x, T.expand(T.reshape(cond, (b, 1, c.dim)), (b, n, c.dim)))

    # -- forward --------------------------------------------------------------

    def tokens_forward_iter(self, tokens, grid, s, family, hooks: HookRegistry | None = None, step: int = 0):
        """Generator computing velocity tokens; yields :class:`Exchange` for group rules."""
        c = self.config
        if hooks is not None:
            hooks.validate(c.layers)
        x = self.embed(tokens, grid, s, family)
        for i in range(c.layers):
            x = self.block(x, i)
            if hooks is None:
                continue
            key = (step, i)
            rule = hooks.injections.get(key)
            if rule is not None:
                x = yield from self._apply(rule, x, key)
            if key in hooks.captures:
                if key in hooks.records:
                    raise HookError(f"slot {key} captured twice")
                hooks.records[key] = HiddenState(step, i, x.data.copy(), tuple(grid))
        if not T.is_grad_enabled():
            T.check_finite(x, "transformer activations")
        return self.head(x)

    def _apply(self, rule, x: Tensor, key):
        if isinstance(rule, Replace):
            value = np.asarray(rule.value)
        elif isinstance(rule, GroupAverage):
            value = yield Exchange(key[0], key[1], rule.group, x.data)
        else:
            raise HookError(f"unknown injection rule {rule!r}")
        if value.shape != x.shape:
            raise HookError(f"injected tensor shape {value.shape} does not match hidden state {x.shape}")
        return Tensor(np.asarray(value, dtype=x.dtype))

    def forward_iter(self, x_s, s, family, hooks: HookRegistry | None = None, step: int = 0):
        """Generator form of :meth:`forward` over videos ``(B, F, H, W, C)``."""
        c = self.config
        arr = x_s.data if isinstance(x_s, Tensor) else np.asarray(x_s)
        tokens, grid = patchify(arr, c.patch)
        if tokens.shape[-1] != c.patch_dim:
            raise ValueError(f"expected {c.channels} channels, got {arr.shape[-1]}")
        w = c.guidance_scale
        v_c = yield from self.tokens_forward_iter(tokens, grid, s, family, hooks, step)
        if w == 1.0:
            v = v_c
        else:
            null = np.zeros(arr.shape[0], dtype=np.int64)
            v_u = drive(self.tokens_forward_iter(tokens, grid, s, null, None, step))
            v = T.add(v_u, T.scale(T.sub(v_c, v_u), w))
        return v, grid

    def forward(self, x_s, s, family, hooks: HookRegistry | None = None, step: int = 0) -> np.ndarray:
        """Predicted velocity as an array with the shape of ``x_s``."""
        v, grid = drive(self.forward_iter(x_s, s, family, hooks, step))
        return unpatchify(v.data, grid, self.config.patch)

    def velocity_iter(self, x_s, s, family, hooks: HookRegistry | None = None, step: int = 0):
        """Sampler entry point: generator returning the velocity array."""
        v, grid = yield from self.forward_iter(x_s, s, family, hooks, step)
        return unpatchify(v.data, grid, self.config.patch)

    def velocity_tokens(self, x_s, s, family) -> Tensor:
        """Differentiable conditional velocity in token space (training path)."""
        tokens, grid = patchify(x_s, self.config.patch)
        return drive(self.tokens_forward_iter(tokens, grid, s, family))

    # -- state ----------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.config.dtype)


def dit_forward(model: DiT, x_s, s, cond, hooks: HookRegistry | None = None, step: int = 0) -> np.ndarray:
    return model.forward(x_s, s, cond, hooks, step)
