"""Sectioned key=value experiment configuration with typed parsing and dotted overrides."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoders import EncoderConfig

PROTOCOLS = ("base-to-novel", "cross-dataset", "domain-generalization", "few-shot",
             "ablation", "lambda-sweep", "depth-sweep")
DIR_TARGETS = ("prototype", "sample")


class ConfigError(ValueError):
    """Unknown key or unparsable value; maps to a usage error on the command line."""


@dataclass
class RunConfig:
    protocol: str = "base-to-novel"
    seeds: tuple[int, ...] = (1, 2, 3)
    figures: bool = True
    dump_saliency: bool = False
    backbone: str = ""      # checkpoint path; empty pretrains in-process


@dataclass
class DataConfig:
    n_classes: int = 20
    samples_per_class: int = 40
    base_fraction: float = 0.6
    test_per_class: int = 20
    k_shot: int = 16
    noise: float = 0.05
    shift_magnitude: float = 0.3
    few_shot_ks: tuple[int, ...] = (1, 2, 4, 8, 16)


@dataclass
class PromptConfig:
    n_visual: int = 4
    n_textual: int = 4
    depth: int = 0          # 0: protocol default (min(L, 9) or min(L, 3))
    init_std: float = 0.02


@dataclass
class OptimConfig:
    lr: float = 0.0025
    momentum: float = 0.9
    epochs: int = 20
    few_shot_epochs: int = 50
    batch_size: int = 4


@dataclass
class LossConfig:
    enable_cir: bool = True
    enable_masking: bool = True
    enable_sr: bool = True
    enable_dir: bool = True
    dir_variant: str = "direction"
    dir_target: str = "prototype"
    lambda_: float = 12.0
    gamma: float = 0.5
    mask_fraction_within: float = 0.5
    tau: float = 0.07


@dataclass
class PretrainConfig:
    steps: int = 2500
    lr: float = 0.001
    batch_classes: int = 16
    samples_per_class: int = 30
    heldout_per_class: int = 10
    floor_multiple: float = 2.0
    seed: int = 0
    drop_prob: float = 0.5      # chance a batch has random patches removed
    max_drop: int = 4           # up to this many patches per image


@dataclass
class SweepConfig:
    lambdas: tuple[float, ...] = (0.0, 1.0, 4.0, 8.0, 12.0, 16.0)
    depths: tuple[int, ...] = (1, 3, 6, 9, 12)
    reference_layers: int = 12


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "ExperimentConfig":
        if self.run.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.run.protocol!r}; expected one of {PROTOCOLS}")
        if self.loss.dir_target not in DIR_TARGETS:
            raise ConfigError(f"loss.dir_target must be one of {DIR_TARGETS}")
        if self.loss.dir_variant not in ("norm", "mse", "direction"):
            raise ConfigError("loss.dir_variant must be norm, mse or direction")
        if self.loss.lambda_ < 0 or self.loss.tau <= 0:
            raise ConfigError("loss.lambda must be >= 0 and loss.tau > 0")
        if not 0 <= self.loss.gamma <= 1 or not 0 <= self.loss.mask_fraction_within <= 1:
            raise ConfigError("loss.gamma and loss.mask_fraction_within must lie in [0, 1]")
        if self.optim.batch_size < 1 or self.optim.epochs < 0 or self.data.k_shot < 1:
            raise ConfigError("optim.batch_size and data.k_shot must be >= 1")
        if not self.run.seeds:
            raise ConfigError("run.seeds must name at least one seed")
        return self

    def section(self, name: str):
        try:
            return getattr(self, name)
        except AttributeError:
            raise ConfigError(f"unknown config section {name!r}") from None

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key changes, e.g. replace(**{"loss.lambda": 0})."""
        out = copy_config(self)
        for key, value in changes.items():
            set_value(out, key, value)
        return out

    def to_text(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                lines.append(f"{_key(f.name)} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _key(name: str) -> str:
    return name.rstrip("_")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            kind = type(current[0]) if current else int
            return tuple(kind(x.strip()) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None


def _field_name(obj, key: str, full: str) -> str:
    names = {_key(f.name): f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown config key {full!r}")
    return names[key]


def set_value(cfg: ExperimentConfig, dotted: str, value) -> None:
    if "." not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key")
    sec_name, key = dotted.split(".", 1)
    sec = cfg.section(sec_name)
    name = _field_name(sec, key, dotted)
    current = getattr(sec, name)
    parsed = _parse(value, current, dotted) if isinstance(value, str) else value
    if dataclasses.is_dataclass(sec) and getattr(type(sec), "__dataclass_params__").frozen:
        try:
            setattr(cfg, sec_name, dataclasses.replace(sec, **{name: parsed}))
        except ValueError as exc:
            raise ConfigError(f"{dotted}: {exc}") from None
    else:
        setattr(sec, name, parsed)


def copy_config(cfg: ExperimentConfig) -> ExperimentConfig:
    return ExperimentConfig(**{f.name: dataclasses.replace(getattr(cfg, f.name)) for f in fields(cfg)})


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like section.key=value")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for sec in parser.sections():
            for key, value in parser.items(sec):
                set_value(cfg, f"{sec}.{key}", value)
    for key, value in (overrides or {}).items():
        set_value(cfg, key, value)
    return cfg.validate()
