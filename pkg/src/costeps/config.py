"""Experiment configuration: strict JSON parsing and canonical hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig

MODES = (
    "train",
    "eval",
    "sample",
    "perturb",
    "cka",
    "energy",
    "swap",
    "ensemble",
    "ablate-window",
    "ablate-frames",
)


class ConfigError(ValueError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason


@dataclass
class ScheduleConfig:
    n_steps: int = 20


@dataclass
class TaskConfig:
    family: str = "maze"
    count: int = 200
    size: int = 5
    frames: int = 8
    seed: int = 1000


@dataclass
class TrainConfig:
    steps: int = 1100
    batch: int = 16
    lr: float = 3e-3
    lr_final: float = 3e-4
    warmup: int = 50
    seed: int = 7
    cond_dropout: float = 0.0
    time_budget_s: float = 1740.0
    log_every: int = 50
    families: list[str] = field(default_factory=lambda: ["maze"])


@dataclass
class InterventionConfig:
    steps: list[int] | None = None
    frames: list[int] | None = None
    seed: int = 99
    scaled: bool = False
    clamp_condition: bool = True


@dataclass
class EnsembleSpec:
    k: int = 3
    layer_window: list[int] = field(default_factory=lambda: [6, 8])
    step_window: list[int] = field(default_factory=lambda: [0])
    seeds: list[int] = field(default_factory=lambda: [11, 22, 33])
    margin: float = 0.02


@dataclass
class SwapSpec:
    steps: list[int] = field(default_factory=lambda: [0])
    layers: list[int] | None = None


@dataclass
class EnergySpec:
    steps: list[int] = field(default_factory=lambda: [0])
    batch_index: int = 0


@dataclass
class AblationSpec:
    windows: dict[str, list[int]] = field(default_factory=lambda: {"early": [0, 2], "full": [0, 11], "mid": [6, 8]})
    frames: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    min_path: int = 4


@dataclass
class ExperimentConfig:
    mode: str = "eval"
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    intervention: InterventionConfig = field(default_factory=InterventionConfig)
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    swap: SwapSpec = field(default_factory=SwapSpec)
    energy: EnergySpec = field(default_factory=EnergySpec)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    seed: int = 0
    model_seed: int = 0
    out_dir: str = "runs/default"
    checkpoint: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")

    def to_dict(self) -> dict:
        return _plain(self)

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form, excluding where outputs are written."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def _convert(tp, value, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected a mapping, got {type(value).__name__}")
        return _build(tp, value, key)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, key)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}")
        item = args[0] if args else typing.Any
        conv = [_convert(item, v, f"{key}[{i}]") for i, v in enumerate(value)]
        return tuple(conv) if origin is tuple else conv
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected a mapping, got {type(value).__name__}")
        return {str(k): _convert(args[1], v, f"{key}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{prefix}{k}" if not prefix else f"{prefix}.{k}", "unknown key")
    kwargs = {}
    for k, v in data.items():
        key = k if not prefix else f"{prefix}.{k}"
        kwargs[k] = _convert(hints[k], v, key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix or cls.__name__, str(exc)) from None


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    return _build(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
