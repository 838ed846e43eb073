"""Pipeline configuration: nested dataclasses loaded from and dumped to YAML."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .bundle import BAConfig
from .gaussians import PhotoConfig
from .lift import GeoConfig


@dataclass
class EpipolarConfig:
    threshold: float | None = None   # px; None scales 1 px at 480 rows to the image height
    base_px: float = 1.0
    iterations: int = 2000
    inlier_px: float = 1.0
    fg_radius: float = 3.0           # px, foreground mask support around dynamic tracks


@dataclass
class LiftConfig:
    spacing: float | None = None     # node spacing; None -> spacing_rel * median foreground depth
    spacing_rel: float = 0.05
    r_init: float | None = None      # skinning radius (squared length); None -> spacing^2
    K: int = 8
    levels: int = 3
    factor: float = 0.5
    K_coarse: int = 4


@dataclass
class GaussianConfig:
    stride: int = 2
    static_stride: int = 4
    opacity: float = 0.8


@dataclass
class EvalConfig:
    pck_fraction: float = 0.05


@dataclass
class PipelineConfig:
    seed: int = 0
    init_focal: float | None = None
    epipolar: EpipolarConfig = field(default_factory=EpipolarConfig)
    ba: BAConfig = field(default_factory=BAConfig)
    lift: LiftConfig = field(default_factory=LiftConfig)
    geo: GeoConfig = field(default_factory=GeoConfig)
    gaussians: GaussianConfig = field(default_factory=GaussianConfig)
    photo: PhotoConfig = field(default_factory=lambda: PhotoConfig(lambda_track=0.1, densify_relative=3.0))
    eval: EvalConfig = field(default_factory=EvalConfig)


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def from_dict(cls, data: dict | None):
    """Build dataclass ``cls`` from a (partial) mapping; unknown keys are errors."""
    data = dict(data or {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            base = getattr(cls(), f.name) if _default_constructible(cls) else tp()
            v = _merge(base, v)
        elif typing.get_origin(tp) is tuple and v is not None:
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def _default_constructible(cls) -> bool:
    try:
        cls()
        return True
    except TypeError:
        return False


def _merge(base, patch: dict):
    merged = to_dict(base)
    for k, v in (patch or {}).items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = {**merged[k], **v}
        else:
            merged[k] = v
    return from_dict(type(base), merged)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    return from_dict(PipelineConfig, data)


def dump_config(cfg: PipelineConfig | None = None) -> str:
    return yaml.safe_dump(to_dict(cfg or PipelineConfig()), sort_keys=False)
