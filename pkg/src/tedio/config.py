"""Dataclass configs and strict JSON (de)serialization."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError, TDTIOError, UsageError


@dataclass
class ModelConfig:
    frames: int = 8
    height: int = 8
    width: int = 8
    channels: int = 1
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    head_dim: int = 16
    cond_vocab: int = 8
    cond_tokens: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim ({self.n_heads}*{self.head_dim})"
            )
        if self.n_blocks < 1 or self.frames < 2:
            raise ConfigError("need n_blocks >= 1 and frames >= 2")
        if min(self.height, self.width, self.channels, self.cond_vocab, self.cond_tokens) < 1:
            raise ConfigError("all extents must be positive")

    @property
    def n_tokens(self) -> int:
        return self.frames * self.height * self.width

    @property
    def n_patches(self) -> int:
        """P = H*W*N_h temporal attention maps per sample."""
        return self.height * self.width * self.n_heads

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.channels, self.height, self.width)


@dataclass
class ScheduleConfig:
    kind: str = "ddpm"
    T: int = 50
    train_positions: int = 1000
    clip_x0: bool = True

    def __post_init__(self):
        if self.kind not in ("ddpm", "flow"):
            raise ConfigError(f"schedule kind must be 'ddpm' or 'flow', got {self.kind!r}")
        if self.T < 1 or self.train_positions % self.T != 0:
            raise ConfigError("train_positions must be a positive multiple of T")


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    seed: int = 0
    log_every: int = 50
    lr_schedule: str = "constant"  # or "cosine": decay to zero over ``steps``
    # weight EMA; 0 keeps the raw weights
    ema_decay: float = 0.0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")


@dataclass
class TedioConfig:
    block: int = 2
    bands: tuple = (-1, 0, 1)
    k: int = 1
    eta: float = 1.0
    n_iters: int = 3
    ell: int = 12
    # explicit 1-based sampling-step indices to optimize; overrides ell when set
    steps: Optional[tuple] = None

    def __post_init__(self):
        self.bands = tuple(int(b) for b in self.bands)
        if self.steps is not None:
            self.steps = tuple(int(s) for s in self.steps)

    def validate(self, model: ModelConfig, T: int) -> None:
        F = model.frames
        if not 1 <= self.block <= model.n_blocks:
            raise UsageError(f"block {self.block} outside 1..{model.n_blocks}")
        if not self.bands or any(abs(b) > F - 2 for b in self.bands):
            raise UsageError(f"every band offset needs |b| <= F-2 = {F - 2}, got {self.bands}")
        if not 1 <= self.k <= model.n_patches:
            raise UsageError(f"k={self.k} outside 1..{model.n_patches}")
        if self.eta < 0:
            raise UsageError("eta must be non-negative")
        if self.n_iters < 0:
            raise UsageError("n_iters must be non-negative")
        if not 0 <= self.ell <= T:
            raise UsageError(f"ell={self.ell} outside 0..{T}")
        if self.steps is not None and any(not 1 <= s <= T for s in self.steps):
            raise UsageError(f"explicit steps must lie in 1..{T}")

    def optimized_steps(self, T: int) -> set[int]:
        """Sampling-loop positions (1 = first step, at t=T) that get refined."""
        if self.steps is not None:
            return set(self.steps)
        return set(range(1, self.ell + 1))


@dataclass
class DataConfig:
    n_clips: int = 512
    jitter_rate: float = 0.0
    jitter_mode: str = "position_noise"
    jitter_amplitude: float = 1.0
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tedio: TedioConfig = field(default_factory=TedioConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    seeds: tuple = (0,)
    cond: Optional[int] = None  # None: seed % cond_vocab
    checkpoint: Optional[str] = None
    corpus: Optional[str] = None
    out: str = "out"
    jobs: int = 1
    dynamic_threshold: float = 0.05
    # subcommand arguments, kept here so a snapshot replays the whole run
    use_tedio: bool = False
    timesteps: tuple = (50, 45, 40)
    blocks: Optional[tuple] = None
    sweep: Optional[str] = None
    values: tuple = ()
    ppm: bool = False

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.timesteps = tuple(int(t) for t in self.timesteps)
        self.values = tuple(int(v) for v in self.values)
        if self.blocks is not None:
            self.blocks = tuple(int(b) for b in self.blocks)


_SECTIONS = {
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "train": TrainConfig,
    "tedio": TedioConfig,
    "data": DataConfig,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {where}.{unknown[0]}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"invalid value in {where}: {e}") from e


def from_dict(data: dict) -> RunConfig:
    data = dict(data)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data.pop(name), name)
    top = _build(RunConfig, data, "config")
    return dataclasses.replace(top, **kwargs)


def to_dict(cfg) -> dict:
    def conv(v):
        if isinstance(v, tuple):
            return list(v)
        return v

    d = dataclasses.asdict(cfg)

    def walk(x):
        if isinstance(x, dict):
            return {k: walk(v) for k, v in x.items()}
        return conv(x)

    return walk(d)


def dumps(cfg) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise TDTIOError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return from_dict(data)


def override(cfg: RunConfig, section: Optional[str], key: str, value: Any) -> RunConfig:
    if section is None:
        return dataclasses.replace(cfg, **{key: value})
    sub = dataclasses.replace(getattr(cfg, section), **{key: value})
    return dataclasses.replace(cfg, **{section: sub})
