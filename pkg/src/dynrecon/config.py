"""Strict run configuration: YAML in, dataclasses out, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .camera import SamplerConfig
from .enhance import EnhancerConfig
from .losses import LossWeights
from .optimize import LearningRates, Schedule
from .render import RenderSettings
from .synthgen import SynthSpec

MANIFEST_SCHEMA = "dynrecon.manifest/1"


class ConfigError(ValueError):
    pass


@dataclass
class RenderConfig:
    near: float = 0.01
    dilation: float = 0.3
    alpha_cutoff: float = 1.0 / 255.0
    tile_size: int = 8
    dtype: str = "float32"

    def settings(self, width: int, height: int) -> RenderSettings:
        return RenderSettings(width, height, self.near, self.dilation,
                              self.alpha_cutoff, self.tile_size, self.dtype)


@dataclass
class SeedingConfig:
    n_static: int = 20000
    n_dynamic: int = 5000
    n_knots: int = 8
    mode: str = "masks"  # "masks" | "random" (uninformed-partition ablation)

    def __post_init__(self):
        if self.mode not in ("masks", "random"):
            raise ConfigError(f"unknown seeding mode {self.mode!r}")


@dataclass
class RunConfig:
    dataset_dir: str = "dataset"
    run_dir: str = "run"
    seed: int = 0
    synth: SynthSpec = field(default_factory=SynthSpec)
    render: RenderConfig = field(default_factory=RenderConfig)
    seeding: SeedingConfig = field(default_factory=SeedingConfig)
    schedule: Schedule = field(default_factory=Schedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 2000

    def to_dict(self):
        return _asdict(self)


_NESTED = {
    "synth": SynthSpec, "render": RenderConfig, "seeding": SeedingConfig,
    "schedule": Schedule, "sampler": SamplerConfig, "enhancer": EnhancerConfig,
    "loss": LossWeights,
}


def _build(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at {path or 'top level'}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown config key(s) at {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(key) if cls is RunConfig else None
        if cls is Schedule and key == "lr":
            sub = LearningRates
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{path}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> RunConfig:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    return _build(RunConfig, data)


def _asdict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _asdict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_asdict(v) for v in obj]
    return obj


def write_manifest(cfg: RunConfig, run_dir, extra=None):
    from . import __version__
    from .io_utils import ensure_dir, write_json
    ensure_dir(run_dir)
    doc = {
        "schema": MANIFEST_SCHEMA,
        "engine_version": __version__,
        "config": cfg.to_dict(),
    }
    if extra:
        doc.update(extra)
    write_json(Path(run_dir) / "manifest.json", doc)
