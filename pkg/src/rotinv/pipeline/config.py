"""Run configuration: nested dataclasses loaded from JSON, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field

from ..meshproxy import ConfigError


@dataclass
class Stage1Config:
    steps: int = 3000
    n_gaussians: int = 2000
    known_geometry: bool = False
    mesh: str | None = None  # ground-truth mesh path for known-geometry mode
    light_index: int = 0  # light angle whose views are fitted
    batch_rays: int = 2048
    sh_degree: int = 1
    init_opacity: float = 0.9
    scale_factor: float = 0.9  # disk sigma relative to the mean sample spacing
    hull_resolution: int = 48
    lr_mu: float = 2e-4
    lr_quat: float = 2e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 2e-2
    lr_sh: float = 1e-2
    mask_weight: float = 0.1


@dataclass
class MeshConfig:
    resolution: int = 128
    padding: float = 0.05
    trunc_voxels: float = 4.0
    alpha_threshold: float = 0.5


@dataclass
class CacheTrainConfig:
    steps: int = 20000
    batch: int = 4096
    lr: float = 1e-3
    hidden: int = 256
    levels: int = 8
    table_size: int = 2**14
    features: int = 2
    base_resolution: int = 16
    growth: float = 1.5
    n_freq: int = 4


@dataclass
class Stage2Config:
    steps: int = 2000
    patch: int = 24  # square pixel patch per step (smoothness terms need neighbours)
    patches_per_step: int = 1
    n_samples: int = 16
    n_residual: int = 1024
    n_residual_inner: int = 16
    use_residual: bool = True
    lambda_residual: float = 10.0
    residual_stop_grad: bool = False
    freeze_cache: bool = False
    backend: str = "mesh"  # "mesh" or "gaussian"
    gaussian_offset: float = 0.05
    specular: bool = True
    area_weighted_residual: bool = False
    env_height: int = 16
    lr_material: float = 5e-3
    lr_env: float = 1e-2
    lr_cache: float = 1e-3
    lr_decay: float = 0.1  # final fraction of each learning rate (exponential schedule)
    w_mask: float = 0.1
    w_albedo_smooth: float = 0.01
    w_rough_smooth: float = 0.01
    w_light_smooth: float = 0.001
    w_light_white: float = 0.001


@dataclass
class RenderConfig:
    n_samples: int = 128
    relight_bounce_samples: int = 8
    ao_samples: int = 256
    chunk: int = 4096


@dataclass
class GenConfig:
    scene: str = "shadow-box"
    angles_deg: list = field(default_factory=lambda: [0.0, 120.0, 240.0])
    n_train: int = 32
    n_test: int = 8
    resolution: int = 128
    spp: int = 256
    max_bounces: int = 4
    ao_samples: int = 256


@dataclass
class RunConfig:
    seed: int = 0
    data: str = "data"
    out: str = "runs/default"
    lights: list | None = None  # light indices used for stage 2 (None: all)
    dtype: str = "float64"
    gen: GenConfig = field(default_factory=GenConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    cache: CacheTrainConfig = field(default_factory=CacheTrainConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    render: RenderConfig = field(default_factory=RenderConfig)

    def validate(self) -> "RunConfig":
        if self.stage2.backend not in ("mesh", "gaussian"):
            raise ConfigError(f"stage2.backend must be 'mesh' or 'gaussian', got {self.stage2.backend!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        for name, v in [("stage2.n_samples", self.stage2.n_samples), ("stage2.patch", self.stage2.patch),
                        ("render.n_samples", self.render.n_samples), ("stage1.n_gaussians", self.stage1.n_gaussians)]:
            if v < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name, v in [("stage1.steps", self.stage1.steps), ("stage2.steps", self.stage2.steps),
                        ("cache.steps", self.cache.steps)]:
            if v < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.stage2.gaussian_offset < 0:
            raise ConfigError("stage2.gaussian_offset must be >= 0")
        if not 0.0 < self.stage2.lr_decay <= 1.0:
            raise ConfigError("stage2.lr_decay must be in (0, 1]")
        if self.cache.table_size & (self.cache.table_size - 1):
            raise ConfigError("cache.table_size must be a power of two")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            kwargs[k] = _build(t, v, prefix + k + ".")
        else:
            kwargs[k] = _coerce(t, v, prefix + k)
    return cls(**kwargs)


def _coerce(t, v, name):
    origin = typing.get_origin(t)
    args = typing.get_args(t)
    if v is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{name} may not be null")
    base = t
    if origin is typing.Union or (origin is not None and type(None) in args):
        base = next(a for a in args if a is not type(None))
    base = typing.get_origin(base) or base
    try:
        if base is bool:
            if not isinstance(v, bool):
                raise TypeError
            return v
        if base is int:
            if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
                raise TypeError
            return int(v)
        if base is float:
            if isinstance(v, bool):
                raise TypeError
            return float(v)
        if base is str:
            if not isinstance(v, str):
                raise TypeError
            return v
        if base is list:
            if not isinstance(v, list):
                raise TypeError
            return list(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: invalid value {v!r}") from None
    return v


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data).validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    return config_from_dict(data)
