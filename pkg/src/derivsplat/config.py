"""Training configuration, loaded from YAML with strict key checking."""

import dataclasses
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .gaussianset import ADMISSIBLE_K

CHILD_INIT_MODES = ("inherit", "random", "zero")


@dataclass
class LearningRates:
    position: float = 1.6e-4
    position_final: float = 1.6e-6
    rotation: float = 1e-3
    scale: float = 5e-3
    derivation: float = 1e-3  # Riemannian; decays linearly to zero
    planes: float = 1e-2
    deform: float = 1e-4
    deform_final: float = 1e-6
    opacity_net: float = 1e-3
    color_net: float = 1e-3


@dataclass
class TrainConfig:
    iterations: int = 5000
    num_gaussians: int = 2000
    K: int = 4
    k_scheduler: bool = False
    k_scheduler_t: int = 6
    plane_shape: tuple = (64, 64, 32)
    latent_dim: int = 32
    deform_width: int = 256
    deform_depth: int = 8
    lambda_l1: float = 0.8
    lambda_dssim: float = 0.2
    deform_warmup: int = 500  # iterations before the deformation net starts updating
    densify_from: int = 3000
    densify_interval: int = 500
    grad_threshold: float = 0.0002
    percent_dense: float = 0.01
    min_opacity: float = 0.0002
    max_scale_frac: float = 0.1  # fraction of the camera extent
    split_divisor: float = 1.6
    child_init: str = "inherit"
    scale_mode: str = "log"
    use_scale_offset: bool = True
    background: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 1000
    lr: LearningRates = field(default_factory=LearningRates)

    def __post_init__(self):
        if isinstance(self.lr, dict):
            self.lr = _build(LearningRates, self.lr, "lr")
        self.plane_shape = tuple(int(v) for v in self.plane_shape)
        self.background = tuple(float(v) for v in self.background)
        self.validate()

    def validate(self):
        if len(self.plane_shape) != 3 or min(self.plane_shape) < 2:
            raise ConfigError("plane_shape must be three sizes >= 2")
        L = self.plane_shape[2]
        if self.K not in ADMISSIBLE_K or L % self.K:
            raise ConfigError(f"K={self.K} must be one of {ADMISSIBLE_K} and divide L={L}")
        if self.lambda_l1 < 0 or self.lambda_dssim < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.iterations < 0 or self.num_gaussians < 1:
            raise ConfigError("iterations must be >= 0 and num_gaussians >= 1")
        if self.log_interval < 1 or self.densify_interval < 1 or self.checkpoint_interval < 1:
            raise ConfigError("intervals must be positive")
        if self.child_init not in CHILD_INIT_MODES:
            raise ConfigError(f"child_init must be one of {CHILD_INIT_MODES}")
        if self.scale_mode not in ("log", "linear"):
            raise ConfigError("scale_mode must be 'log' or 'linear'")
        if len(self.background) != 3:
            raise ConfigError("background must be an RGB triple")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["plane_shape"] = list(self.plane_shape)
        d["background"] = list(self.background)
        return d

    def replace(self, **changes):
        d = self.to_dict()
        for k, v in changes.items():
            if k not in d:
                raise ConfigError(f"unknown config key {k!r}")
            d[k] = v
        return config_from_dict(d)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(data):
    return _build(TrainConfig, dict(data or {}), "config")


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
