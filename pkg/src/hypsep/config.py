"""Experiment configuration: nested dataclasses loaded from JSON with strict keys."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import nn
from .optim import OptimConfig
from .scene import DatasetConfig
from .signal import StftConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    # "table1-desk" (desk-scale override), "table1-full" or "parent-2src"
    preset: str = "table1-desk"
    chunk_seconds: float = 6.0
    beta: tuple[float, float] = (1.5, 1.5)
    counts: dict | None = None          # optional per-split override of the preset counts

    def build(self, children: int) -> DatasetConfig:
        cfg = DatasetConfig.preset(self.preset, children, self.chunk_seconds)
        if self.counts is not None:
            cfg = DatasetConfig(cfg.densities, {k: list(v) for k, v in self.counts.items()}, self.chunk_seconds)
        cfg.beta = tuple(self.beta)
        return cfg


@dataclass
class ProbeSection:
    relative_distances: list[float] = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4])
    near_distances: list[float] = field(default_factory=lambda: [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    rooms: int = 4
    far_distance: float = 2.9


@dataclass
class ExperimentConfig:
    """Everything one command needs; resolved defaults are echoed next to outputs.

    Desk-scale overrides relative to the full-scale settings: a 64x64 per-bin
    network over utterance statistics instead of the 4x600 recurrent stack,
    single-example steps on 1000 random bins drawn 8 times per epoch, lr 3e-3,
    at most 50 epochs and a 200-scene training split.
    """

    seed: int = 0
    children: int = 2
    c: float = -1.0
    tau: float = 0.8
    levels: str = "two-level"
    child_mask: str = "joint"
    curvatures: list[float] = field(default_factory=lambda: [0.0, -0.1, -1.0])
    workers: int = 1
    stft: StftConfig = field(default_factory=StftConfig)
    encoder: nn.EncoderConfig = field(default_factory=nn.EncoderConfig.desk)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=3e-3))
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    probe: ProbeSection = field(default_factory=ProbeSection)

    def validate(self) -> "ExperimentConfig":
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0 m, got {self.tau}")
        if self.c > 0 or any(c > 0 for c in self.curvatures):
            raise ConfigError("curvature c must be <= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.encoder.n_bins != self.stft.n_bins:
            raise ConfigError(f"encoder expects {self.encoder.n_bins} bins but the STFT gives {self.stft.n_bins}")
        try:
            self.model()
            self.dataset.build(self.children)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        return self

    def model(self, c: float | None = None) -> nn.ModelConfig:
        return nn.ModelConfig(self.encoder, nn.HierarchySpec(self.children), self.c if c is None else float(c),
                              self.levels, self.child_mask)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config").validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON: {err}") from err
        return cls.from_dict(d)


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, val in d.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, val, f"{where}.{name}")
        elif typing.get_origin(tp) is tuple and isinstance(val, list):
            kwargs[name] = tuple(val)
        else:
            kwargs[name] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err
