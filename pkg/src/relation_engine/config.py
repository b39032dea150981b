"""Run configuration: YAML file sections `model`, `train` and `data`.

Values resolve as command-line flag > config file > dataclass default.
Unknown sections or keys are errors, so a typo never silently falls back
to a default.

Usage:
    config = RunConfig.from_yaml("config/default.yml")
    config = config.with_overrides({"model": {"spatial": False}})
    rng = np.random.default_rng(derive_seed(config.train.seed, "init"))
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from relation_engine.errors import ConfigError

SEED_LABELS = ("init", "data", "sample", "order", "split", "gen")
DATA_MODES = ("vrd", "binary")
MASK_LOSSES = ("mse", "bce")


def derive_seed(root: int, label: str) -> int:
    """Subsystem seed: first 8 bytes of sha256("<root>:<label>") as an unsigned int."""
    digest = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class ModelConfig:
    """Model dimensions and ablation switches (desk-scale defaults)."""
    d: int = 64
    L: int = 2
    M: int = 4
    d_ff: int = 256
    d_s: int = 64
    d_c: int = 64
    d_w: int = 14
    d_h: int = 14
    p_max: int = 64
    backbone_hidden: int = 16
    spatial: bool = True
    mask_attention: bool = True
    mask_loss: str = "mse"
    fusion: str = "concat"

    def __post_init__(self):
        for name in ("d", "M", "d_ff", "d_s", "d_c", "d_w", "d_h", "p_max", "backbone_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.L < 0:
            raise ConfigError(f"model.L must be >= 0, got {self.L}")
        if self.d % self.M:
            raise ConfigError(f"model.d ({self.d}) must be divisible by model.M ({self.M})")
        if self.d_ff < self.d:
            raise ConfigError(f"model.d_ff ({self.d_ff}) must be >= model.d ({self.d})")
        if self.mask_loss not in MASK_LOSSES:
            raise ConfigError(f"model.mask_loss must be one of {MASK_LOSSES}, got {self.mask_loss!r}")
        # parse early so a bad fusion string fails at load time
        from relation_engine.spatial import FusionConfig
        fusion = FusionConfig.parse(self.fusion)
        if fusion.is_alpha and self.d_s != self.d:
            raise ConfigError(
                f"alpha fusion needs model.d_s == model.d, got d_s={self.d_s}, d={self.d}"
            )


@dataclass
class TrainConfig:
    lr: float = 5e-4
    warmup: int = 200
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    freeze_backbone: bool = False
    pairs_per_image: int = 32
    positives_per_image: int = 8

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"train.lr must be >= 0, got {self.lr}")
        if self.warmup < 0:
            raise ConfigError(f"train.warmup must be >= 0, got {self.warmup}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size > 0")
        if not 0 < self.positives_per_image <= self.pairs_per_image:
            raise ConfigError("train.positives_per_image must lie in (0, pairs_per_image]")


@dataclass
class DataConfig:
    mode: str = "vrd"
    images: int = 600
    min_objects: int = 2
    max_objects: int = 5
    width: int = 128
    height: int = 128
    min_side: int = 12
    max_side: int = 48
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.mode not in DATA_MODES:
            raise ConfigError(f"data.mode must be one of {DATA_MODES}, got {self.mode!r}")
        if self.images <= 0:
            raise ConfigError(f"data.images must be positive, got {self.images}")
        if not 2 <= self.min_objects <= self.max_objects:
            raise ConfigError("data.min_objects must be >= 2 and <= data.max_objects")
        if self.width < 32 or self.height < 32:
            raise ConfigError("data.width and data.height must be >= 32")
        if not 0 < self.min_side <= self.max_side:
            raise ConfigError("data.min_side must be positive and <= data.max_side")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ConfigError(f"data.train_fraction must lie in [0, 1], got {self.train_fraction}")


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _build_section(name: str, values: Optional[dict]) -> Any:
    cls = _SECTIONS[name]
    values = values or {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"section {name!r}: {e}") from None


@dataclass
class RunConfig:
    """Fully resolved configuration, echoed into logs and checkpoints."""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "train": asdict(self.train), "data": asdict(self.data)}

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> RunConfig:
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        unknown = sorted(set(data) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        return cls(**{name: _build_section(name, data.get(name)) for name in _SECTIONS})

    @classmethod
    def from_yaml(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            with open(path) as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
        return cls.from_dict(data)

    def to_yaml(self, path: str | Path) -> None:
        with open(path, "w") as f:
            yaml.dump(self.to_dict(), f, default_flow_style=False, sort_keys=False)

    def with_overrides(self, overrides: dict[str, dict[str, Any]]) -> RunConfig:
        """Apply flag values over this config; `None` values mean "not given"."""
        sections = {}
        for name in _SECTIONS:
            current = getattr(self, name)
            given = {k: v for k, v in (overrides.get(name) or {}).items() if v is not None}
            unknown = sorted(set(given) - {f.name for f in fields(current)})
            if unknown:
                raise ConfigError(f"unknown override(s) for {name!r}: {', '.join(unknown)}")
            sections[name] = replace(current, **given) if given else current
        extra = sorted(set(overrides) - set(_SECTIONS))
        if extra:
            raise ConfigError(f"unknown override section(s): {', '.join(extra)}")
        return RunConfig(**sections)
