"""Run configuration from a TOML file, overridable from the command line."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .fitter import DEFAULT_MULTIPLIERS, FitConfig
from .io import InputError
from .losses import LossWeights
from .scene import Camera

CONFIG_ENV = "FACERECON_CONFIG"
TOY_MODEL = "toy"


@dataclass
class CameraSpec:
    width: int = 224
    height: int = 224
    focal: float | None = None   # None: scaled default for the width

    def build(self) -> Camera:
        return Camera.default(self.width, self.height, self.focal)


@dataclass
class FitSpec:
    iterations: int = 2000
    lr: float = 0.01
    warmup_fraction: float = 0.25
    final_lr_fraction: float = 0.05
    init_depth: float = 600.0
    multipliers: dict = field(default_factory=lambda: dict(DEFAULT_MULTIPLIERS))

    def build(self, init=None) -> FitConfig:
        return FitConfig(iterations=self.iterations, lr=self.lr, warmup_fraction=self.warmup_fraction,
                         final_lr_fraction=self.final_lr_fraction, multipliers=dict(self.multipliers), init=init)


@dataclass
class SynthSpec:
    count: int = 4
    size: int = 224
    poses: str = "grid"            # "grid" or "random"
    views: int = 1                 # images per subject when poses = "random"
    occlusion: float = 0.0         # fraction of images with an occluder
    landmark_noise: float = 0.0    # fraction of images with noisy landmarks
    landmark_noise_px: float = 2.0
    pixel_noise: float = 0.0


@dataclass
class ConfidenceSpec:
    epochs: int = 100
    lr: float = 0.01
    hidden: int = 32
    train_fraction: float = 0.5


@dataclass
class RunConfig:
    model: str = TOY_MODEL
    seed: int = 0
    output: str = "out"
    skin_gmm: str = ""                 # empty: built-in synthetic-corpus classifier
    jobs: int = 1
    camera: CameraSpec = field(default_factory=CameraSpec)
    weights: dict = field(default_factory=dict)
    fit: FitSpec = field(default_factory=FitSpec)
    embedder: dict = field(default_factory=lambda: {"kind": "random_projection", "size": 32, "dim": 128, "seed": 0})
    synth: SynthSpec = field(default_factory=SynthSpec)
    confidence: ConfidenceSpec = field(default_factory=ConfidenceSpec)

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(**self.weights)
        except TypeError as e:
            raise InputError(f"bad [weights] section: {e}") from e

    def validate(self) -> None:
        self.loss_weights()
        if self.model != TOY_MODEL and not Path(self.model).is_file():
            raise InputError(f"model file not found: {self.model}")
        if self.skin_gmm and not Path(self.skin_gmm).is_file():
            raise InputError(f"skin classifier not found: {self.skin_gmm}")
        if self.jobs < 1:
            raise InputError("jobs must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


_SECTIONS = {"camera": CameraSpec, "fit": FitSpec, "synth": SynthSpec, "confidence": ConfidenceSpec}


def _merge_section(cls, current, values: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise InputError(f"unknown keys in [{name}]: {sorted(unknown)}")
    d = asdict(current)
    for k, v in values.items():
        if k == "multipliers":
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return cls(**d)


def apply_overrides(cfg: RunConfig, data: dict) -> RunConfig:
    """Merge a nested dict (TOML layout) into ``cfg``; dotted keys address sections."""
    nested: dict = {}
    for k, v in data.items():
        if "." in k:
            sec, key = k.split(".", 1)
            nested.setdefault(sec, {})[key] = v
        elif isinstance(v, dict):
            nested.setdefault(k, {}).update(v)
        else:
            nested[k] = v
    top = {f.name for f in fields(RunConfig)}
    for k, v in nested.items():
        if k not in top:
            raise InputError(f"unknown config key {k!r}")
        if k in _SECTIONS:
            setattr(cfg, k, _merge_section(_SECTIONS[k], getattr(cfg, k), v, k))
        elif k in ("weights", "embedder"):
            setattr(cfg, k, {**getattr(cfg, k), **v})
        else:
            setattr(cfg, k, v)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the TOML file (explicit path or $FACERECON_CONFIG), then overrides."""
    cfg = RunConfig()
    path = path or os.environ.get(CONFIG_ENV) or None
    if path:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {p}")
        try:
            data = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as e:
            raise InputError(f"invalid TOML in {p}: {e}") from e
        base = p.parent
        for key in ("model", "skin_gmm"):
            v = data.get(key)
            if isinstance(v, str) and v and v != TOY_MODEL and not Path(v).is_absolute():
                data[key] = str(base / v)
        apply_overrides(cfg, data)
    if overrides:
        apply_overrides(cfg, {k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg
