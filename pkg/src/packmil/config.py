"""Run configuration: typed sections plus the ``key = value`` text format.

Keys are dotted (``loss.lambda``, ``ads.k``).  Unknown keys are rejected at
parse time so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

TASKS = ("grading", "subtyping", "survival")


class ConfigError(ValueError):
    pass


class UnknownKeyError(ConfigError):
    pass


@dataclass
class SynthConfig:
    n_bags: int = 200
    dim: int = 16
    task: str = "grading"
    n_classes: int = 3
    len_mu: float = math.log(200.0)
    len_sigma: float = 1.0
    len_min: int = 16
    len_max: int = 4096
    signal_fraction: float = 0.1
    signal_scale: float = 3.0
    noise_scale: float = 1.0
    censor_rate: float = 0.3
    time_bins: int = 4
    val_fraction: float = 0.2
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"data.task must be one of {TASKS}, got {self.task!r}")
        if self.n_bags < 1 or self.dim < 1:
            raise ConfigError("data.n_bags and data.dim must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("data.n_classes must be >= 2")
        if not (self.len_sigma >= 0 and math.isfinite(self.len_mu)):
            raise ConfigError(f"invalid length distribution mu={self.len_mu} sigma={self.len_sigma}")
        if not 1 <= self.len_min <= self.len_max:
            raise ConfigError(f"length clip range [{self.len_min}, {self.len_max}] is empty")
        if not 0.0 <= self.signal_fraction <= 1.0:
            raise ConfigError("data.signal_fraction must lie in [0, 1]")
        if not 0.0 <= self.censor_rate < 1.0:
            raise ConfigError("data.censor_rate must lie in [0, 1)")
        if self.time_bins < 2:
            raise ConfigError("data.time_bins must be >= 2")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise ConfigError("split fractions must be non-negative and leave a training split")


@dataclass
class AdsConfig:
    enabled: bool = False
    k: int = 4
    pool: str = "random"
    placement: str = "after"
    hidden: int = 128

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("ads.k must be >= 1")
        if self.pool not in ("random", "max"):
            raise ConfigError(f"ads.pool must be random|max, got {self.pool!r}")
        if self.placement not in ("before", "after"):
            raise ConfigError(f"ads.placement must be before|after, got {self.placement!r}")


@dataclass
class LossConfig:
    lam: float = 0.2
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    alpha_focal: float = 0.25
    gamma_focal: float = 2.0
    alpha_cens: float = 0.0

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError("loss.lambda must be >= 0")
        if self.gamma_pos < 0 or self.gamma_neg < 0 or self.gamma_focal < 0:
            raise ConfigError("focusing parameters must be >= 0")
        if not (0 <= self.alpha_focal <= 1 and 0 <= self.alpha_cens <= 1):
            raise ConfigError("alpha parameters must lie in [0, 1]")


@dataclass
class ModelConfig:
    d_attn: int = 128
    norm: bool = False

    def validate(self) -> None:
        if self.d_attn < 1:
            raise ConfigError("model.d_attn must be >= 1")


@dataclass
class TrainConfig:
    batch_size: int = 1
    lr: float = 1e-4
    lr_scaling: str = "none"
    cosine: bool = True
    epochs: int = 30
    patience: int = 20
    stop_start: int = 30
    pack_length: int = 512
    split_ratio: float = 0.4
    sampling: bool = True
    min_patches: int = 8
    pack: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.lr_scaling not in ("none", "sqrt"):
            raise ConfigError("train.lr_scaling must be none|sqrt")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"train.split_ratio must lie in (0, 1), got {self.split_ratio}")
        if self.pack_length < max(1, self.min_patches):
            raise ConfigError("train.pack_length must be >= train.min_patches")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")


@dataclass
class Config:
    data: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ads: AdsConfig = field(default_factory=AdsConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def task(self) -> str:
        return self.data.task

    def validate(self) -> "Config":
        for sec in (self.data, self.train, self.ads, self.loss, self.model):
            sec.validate()
        return self

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        attr = _ALIASES.get(key, name)
        sec = getattr(self, section, None) if section in _SECTIONS else None
        if sec is None or not name or attr not in {f.name for f in dataclasses.fields(sec)}:
            raise UnknownKeyError(f"unknown config key {key!r}")
        ftype = {f.name: f.type for f in dataclasses.fields(sec)}[attr]
        setattr(sec, attr, _coerce(key, raw, ftype))

    def update(self, pairs: dict[str, str]) -> "Config":
        for k, v in pairs.items():
            self.set(k, v)
        return self

    def items(self) -> list[tuple[str, object]]:
        out = []
        for section in _SECTIONS:
            sec = getattr(self, section)
            for f in dataclasses.fields(sec):
                name = _REVERSE_ALIASES.get(f"{section}.{f.name}", f"{section}.{f.name}")
                out.append((name, getattr(sec, f.name)))
        return sorted(out)


_SECTIONS = ("data", "train", "ads", "loss", "model")
_ALIASES = {"loss.lambda": "lam"}
_REVERSE_ALIASES = {"loss.lam": "loss.lambda"}


def _coerce(key: str, raw: str, ftype) -> object:
    raw = raw.strip()
    tname = ftype if isinstance(ftype, str) else ftype.__name__
    try:
        if tname == "bool":
            low = raw.lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ValueError(raw)
        if tname == "int":
            return int(raw)
        if tname == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key} ({tname})") from exc
    return raw


def parse_config_text(text: str, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise type(exc)(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        parse_config_text(text, cfg)
    if overrides:
        cfg.update(overrides)
    return cfg.validate()


def dump_config(cfg: Config) -> str:
    lines = []
    for key, value in cfg.items():
        if isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def task_defaults(task: str) -> Config:
    """Per-task hyperparameters from the reference recipe (lambda, split, ADS)."""
    cfg = Config()
    cfg.data.task = task
    if task == "grading":
        cfg.loss.lam, cfg.train.split_ratio = 0.2, 0.4
        cfg.ads.enabled = False
    elif task == "subtyping":
        cfg.loss.lam, cfg.train.split_ratio = 0.2, 0.4
        cfg.ads.enabled, cfg.ads.k, cfg.ads.pool = True, 4, "random"
    elif task == "survival":
        cfg.loss.lam, cfg.train.split_ratio = 0.5, 0.5
        cfg.ads.enabled, cfg.ads.k, cfg.ads.pool = True, 3, "max"
    else:
        raise ConfigError(f"unknown task {task!r}")
    return cfg
