"""Experiment configuration and its flat ``key = value`` file format.

Blank lines and ``#`` comments are ignored; list values are comma separated::

    mode = heterogeneous
    rounds = 10
    client_channels = 3, 3, 4, 4
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .data import PartitionSpec, Style
from .errors import ConfigError
from .models import SegNetConfig

MODES = ("homogeneous", "heterogeneous")
PSEUDO_LABELS = ("agreement", "client_only", "teacher_only")


@dataclass
class ExperimentConfig:
    mode: str = "homogeneous"
    rounds: int = 10
    seed: int = 0
    pseudo_label: str = "agreement"

    # data
    image_size: int = 64
    num_classes: int = 2
    styles: tuple = ("blob", "ring", "multiblob")
    noise_sd: float = 0.12
    contrast: tuple = (0.1, 0.25)
    public_count: int = 20
    client_counts: tuple = (10, 20, 40, 60)
    noniid_skew: float = 0.5
    split: tuple = (0.8, 0.1, 0.1)

    # architectures
    client_channels: tuple = (4, 4, 4, 4)
    client_depth: tuple = (2, 2, 2, 2)
    global_channels: int = 4
    global_depth: int = 2
    teacher_channels: int = 16
    teacher_depth: int = 2

    # teacher: broad pretraining on cleaner, higher-contrast images, then
    # low-rank fine-tuning of the last decoder conv and the head on the public set
    foundation_count: int = 48
    foundation_styles: tuple = ("blob", "multiblob")
    foundation_noise_sd: float = 0.01
    foundation_contrast: tuple = (0.35, 0.7)
    foundation_epochs: int = 12
    teacher_epochs: int = 10
    lora_rank: int = 2
    lora_alpha: float = 4.0
    lora_dropout: float = 0.1
    lora_targets: tuple = ("dec1.c2", "head")

    # optimisation
    optimizer: str = "adamw"
    pretrain_lr: float = 3e-3
    pretrain_epochs: int = 40
    lr: float = 2e-3
    epochs: int = 2
    batch_size: int = 4
    beta: float = 0.5
    rf_epochs: int = 1

    output: str = "runs/default"
    threads: int = 1

    def segnet(self, channels: int, depth: int) -> SegNetConfig:
        return SegNetConfig(channels, depth, self.num_classes, (self.image_size, self.image_size))

    def client_configs(self) -> list[SegNetConfig]:
        return [self.segnet(c, d) for c, d in zip(self.client_channels, self.client_depth)]

    @property
    def teacher_config(self) -> SegNetConfig:
        return self.segnet(self.teacher_channels, self.teacher_depth)

    @property
    def global_config(self) -> SegNetConfig:
        return self.segnet(self.global_channels, self.global_depth)

    @property
    def lora_layers(self) -> Optional[list]:
        return None if tuple(self.lora_targets) == ("all",) else list(self.lora_targets)

    @property
    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(self.public_count, tuple(self.client_counts), self.noniid_skew,
                             tuple(self.split))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pseudo_label not in PSEUDO_LABELS:
            raise ConfigError(f"pseudo_label must be one of {PSEUDO_LABELS}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError("optimizer must be sgd or adamw")
        if self.rounds < 0 or self.epochs < 0 or self.rf_epochs < 0:
            raise ConfigError("rounds/epochs must be non-negative")
        if self.batch_size < 1 or self.threads < 1:
            raise ConfigError("batch_size and threads must be >= 1")
        if self.num_classes != 2:
            raise ConfigError("the synthetic generator produces binary masks; num_classes must be 2")
        if not self.client_counts:
            raise ConfigError("at least one client is required")
        if not (len(self.client_counts) == len(self.client_channels) == len(self.client_depth)):
            raise ConfigError("client_counts, client_channels and client_depth must align")
        if self.lr < 0 or self.pretrain_lr < 0 or self.beta < 0:
            raise ConfigError("learning rates and beta must be non-negative")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError("lora_dropout must be in [0, 1)")
        if not self.lora_targets:
            raise ConfigError("lora_targets must name layers or be 'all'")
        if self.lora_rank < 1 or self.lora_alpha <= 0:
            raise ConfigError("lora_rank must be >= 1 and lora_alpha > 0")
        try:
            for s in tuple(self.styles) + tuple(self.foundation_styles):
                Style(s)
            self.partition_spec.validate()
            cfgs = self.client_configs() + [self.teacher_config, self.global_config]
            for c in cfgs:
                c.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.mode == "homogeneous":
            if len({c.arch_fingerprint for c in self.client_configs()}) != 1:
                raise ConfigError("homogeneous mode requires identical client architectures")
        return self


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        items = [v.strip() for v in raw.split(",") if v.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(v) for v in items)
    return type(default)(raw)


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            changes[key] = _coerce(value, known[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return dataclasses.replace(cfg, **changes).validate()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"
