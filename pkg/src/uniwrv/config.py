"""YAML run configuration with model / data / train / flags sections."""

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .weathergen import DatasetConfig


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    lr_min: float = 1e-5
    crop: int = 24
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 1
    augment: bool = True

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be >= 1")
        if self.crop % 4 or self.crop < 4:
            raise ConfigError(f"crop {self.crop} must be a positive multiple of 4")
        if not 0 < self.lr_min <= self.lr:
            raise ConfigError("need 0 < lr_min <= lr")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")


@dataclass
class Flags:
    hard_routing: bool = False
    grad_mode_64bit: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flags: Flags = field(default_factory=Flags)

    def resolved_model(self):
        """Model config with the run flags folded in."""
        cfg = self.model
        if self.flags.hard_routing:
            cfg = replace(cfg, hard_routing=True)
        if self.flags.grad_mode_64bit:
            cfg = replace(cfg, dtype="float64")
        return cfg

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "data": asdict(self.data),
            "train": asdict(self.train),
            "flags": asdict(self.flags),
        }

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    if hasattr(cls, "from_dict"):
        return cls.from_dict(raw)
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return cls(**raw)


def run_config_from_dict(d):
    d = d or {}
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(d) - {"model", "data", "train", "flags"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        return RunConfig(
            model=_section(ModelConfig, d.get("model"), "model"),
            data=_section(DatasetConfig, d.get("data"), "data"),
            train=_section(TrainConfig, d.get("train"), "train"),
            flags=_section(Flags, d.get("flags"), "flags"),
        )
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    return run_config_from_dict(raw)
