"""Run configuration: dataclasses plus an INI reader that rejects unknown keys.

Sections: [backbone] [data] [train] [patch] [variance].
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .optim import ConfigError

VARIANTS = ("delta", "fc_only", "learnable_skip", "all_skips", "all_skips_learnable", "random_lambda")


@dataclass
class BackboneConfig:
    preset: str = "tiny"
    base_epochs: int = 10
    base_lr: float = 0.05


@dataclass
class DataConfig:
    source: str = "synth"
    seed: int = 0
    task_count: int = 4
    classes_per_task: int = 5
    samples_per_class: int = 100
    test_per_class: int = 60
    image_size: int = 16
    noise: float = 0.25
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    # class groups for IDX corpora, e.g. "0-4;5-9"; the first group is the base task
    class_groups: str = "0-4;5-9"


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"
    seed: int = 0
    eval_every: int = 0
    variant: str = "delta"
    n_modules: int = 1
    skip_bn: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be cosine or constant, got {self.schedule!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.n_modules not in (0, 1, 2, 4):
            raise ConfigError(f"n_modules must be 1, 2 or 4, got {self.n_modules}")
        if self.variant == "fc_only" and self.n_modules != 0:
            raise ConfigError("fc_only takes no modules (n_modules must be 0)")
        if self.variant in ("delta", "random_lambda") and self.n_modules == 0:
            raise ConfigError(f"{self.variant} needs n_modules in 1, 2, 4")
        return self


@dataclass
class PatchConfig:
    scenario: str = "single"
    tasks: str = "1"
    variant: str = "delta"
    n_modules: int = 1
    skip_bn: bool = False
    alpha_grid: str = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"

    def task_indices(self) -> list[int]:
        return [int(t) for t in self.tasks.replace(";", ",").split(",") if t.strip()]

    def alphas(self) -> list[float]:
        return [float(a) for a in self.alpha_grid.split(",") if a.strip()]


@dataclass
class VarianceConfig:
    depth: int = 8
    width: int = 64
    skip_mode: str = "none"
    bn: bool = False
    samples: int = 10000
    seed: int = 0
    realization: str = "dense"


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    variance: VarianceConfig = field(default_factory=VarianceConfig)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value: str, typ, where: str):
    try:
        if typ in (bool, "bool"):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {typ}") from None


def _fill(obj, section: configparser.SectionProxy, name: str) -> None:
    known = {f.name: f for f in fields(obj)}
    for key, value in section.items():
        if key not in known:
            raise ConfigError(f"unknown key [{name}] {key}")
        setattr(obj, key, _coerce(value, known[key].type, f"[{name}] {key}"))


def load_config(path: str | os.PathLike | None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        _read_ini(cfg, path)
    seed = os.environ.get("DPATCH_SEED")
    if seed:
        apply_seed(cfg, _coerce(seed, int, "DPATCH_SEED"))
    return cfg


def _read_ini(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        with open(path) as f:
            parser.read_file(f)
    except (configparser.Error, OSError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    for name in parser.sections():
        if not hasattr(cfg, name):
            raise ConfigError(f"unknown section [{name}]")
        _fill(getattr(cfg, name), parser[name], name)


def apply_seed(cfg: RunConfig, seed: int) -> None:
    cfg.data.seed = seed
    cfg.train.seed = seed
    cfg.variance.seed = seed


def dump_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    for name, section in cfg.as_dict().items():
        parser[name] = {k: str(v) for k, v in section.items()}
    with open(Path(path), "w") as f:
        parser.write(f)
