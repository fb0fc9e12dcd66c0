"""Structured run configuration: one document covering every stage, loaded
from YAML with unknown keys rejected, and re-serializable as the resolved
snapshot written next to each run's outputs."""

import dataclasses
from dataclasses import dataclass, field as dfield

import yaml

from .fields import FieldConfig
from .renderer import ModelConfig, SamplingConfig
from .training import LossConfig, TrainConfig
from .volumes import EncoderConfig


class ConfigError(Exception):
    pass


@dataclass
class SceneConfig:
    kind: str = "sphere"            # "sphere" or "capsule-body"
    sphere_radius: float = 0.5
    template_resolution: int = 24   # coarse-template remesh (capsule body)
    reference_resolution: int = 96
    reference_points: int = 10000

    def __post_init__(self):
        if self.kind not in ("sphere", "capsule-body"):
            raise ConfigError("unknown scene kind: %r" % self.kind)


@dataclass
class RigConfig:
    paper_scale: bool = False       # 9 x 15 = 135 cameras at 2.4 m
    distance: float = 2.4
    yaw_start: float = -30.0
    yaw_stop: float = 30.0
    yaw_step: float = 30.0
    roll_start: float = 0.0
    roll_stop: float = 360.0
    roll_step: float = 40.0
    width: int = 64
    height: int = 64
    fov_deg: float = 34.0


@dataclass
class EvalConfig:
    mesh_resolution: int = 64
    n_surface_samples: int = 10000
    held_out_views: tuple = ()      # view indices excluded from training


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneConfig = dfield(default_factory=SceneConfig)
    rig: RigConfig = dfield(default_factory=RigConfig)
    model: ModelConfig = dfield(default_factory=ModelConfig)
    sampling: SamplingConfig = dfield(default_factory=SamplingConfig)
    loss: LossConfig = dfield(default_factory=LossConfig)
    train: TrainConfig = dfield(default_factory=TrainConfig)
    eval: EvalConfig = dfield(default_factory=EvalConfig)


def _from_dict(cls, data, path="config"):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("%s: expected a mapping, got %r" % (path, data))
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError("%s: unknown keys %s" % (path, sorted(unknown)))
    kwargs = {}
    for key, value in data.items():
        ftype = names[key].type
        if isinstance(ftype, type) and dataclasses.is_dataclass(ftype):
            kwargs[key] = _from_dict(ftype, value, "%s.%s" % (path, key))
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError("%s: %s" % (path, exc))


def from_dict(data):
    return _from_dict(RunConfig, data)


def to_dict(cfg):
    def clean(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: clean(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        return obj
    return clean(cfg)


def load_config(path):
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError("cannot parse %s: %s" % (path, exc))
    return from_dict(data)


def save_resolved(path, cfg):
    """Write the fully resolved configuration snapshot for re-execution."""
    with open(path, "w") as f:
        yaml.safe_dump(to_dict(cfg), f, sort_keys=True)
