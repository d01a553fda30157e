"""Training configuration and its flat ``key = value`` text form."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # data / augmentation
    crop_dims: tuple[int, int, int] = (64, 128, 128)
    labeled_bs: int = 2
    unlabeled_bs: int = 2
    flip: bool = True
    gamma_min: float = 0.7
    gamma_max: float = 1.5
    # schedule / optimisation
    e_max: int = 1500
    steps_per_epoch: int = 10
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 3e-5
    lambda_unsup: float = 0.5
    ema_momentum: float = 0.99
    conf_threshold: float = 0.0  # 0 disables confidence masking
    # network
    base_channels: int = 16
    stages: int = 4
    use_aux: bool = True
    # progressive imbalance-aware cutmix
    pic_gamma: float = 1.0
    pic_eta: float = 2 / 3  # inf keeps the balanced distribution, 0 is always uniform
    patch_dims: Optional[tuple[int, int, int]] = None  # None -> half the crop
    # feature distillation
    use_fkd: bool = True
    teacher_kind: str = "fixture"
    teacher_weights: str = ""
    teacher_channels: int = 16
    teacher_input: int = 32
    distill_input: str = "mix"
    projector: str = "linear"
    # evaluation / bookkeeping
    eval_stride: tuple[int, int, int] = (32, 32, 16)
    val_every: int = 1
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint
    seed: int = 0

    def __post_init__(self):
        validate(self)

    @property
    def total_steps(self) -> int:
        return self.e_max * self.steps_per_epoch

    @property
    def patch(self) -> tuple[int, int, int]:
        return self.patch_dims or tuple(max(1, c // 2) for c in self.crop_dims)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


_POSITIVE_INT = ("labeled_bs", "unlabeled_bs", "e_max", "steps_per_epoch", "base_channels",
                 "stages", "teacher_channels", "teacher_input", "val_every")
_NON_NEGATIVE = ("lr0", "weight_decay", "lambda_unsup", "pic_gamma", "pic_eta", "checkpoint_every")
_UNIT = ("momentum", "ema_momentum", "conf_threshold")
_CHOICES = {
    "teacher_kind": ("fixture", "vit"),
    "distill_input": ("mix", "unlabeled"),
    "projector": ("linear", "mlp"),
}


def validate(cfg: TrainConfig) -> None:
    for k in _POSITIVE_INT:
        if getattr(cfg, k) < 1:
            raise ConfigError(f"{k} must be >= 1, got {getattr(cfg, k)}")
    for k in _NON_NEGATIVE:
        if not getattr(cfg, k) >= 0:
            raise ConfigError(f"{k} must be >= 0, got {getattr(cfg, k)}")
    for k in _UNIT:
        if not 0 <= getattr(cfg, k) <= 1:
            raise ConfigError(f"{k} must lie in [0, 1], got {getattr(cfg, k)}")
    for k in ("crop_dims", "eval_stride") + (("patch_dims",) if cfg.patch_dims else ()):
        v = getattr(cfg, k)
        if len(v) != 3 or min(v) < 1:
            raise ConfigError(f"{k} must be three positive integers, got {v}")
    if cfg.patch_dims and any(p > c for p, c in zip(cfg.patch_dims, cfg.crop_dims)):
        raise ConfigError(f"patch_dims {cfg.patch_dims} must not exceed crop_dims {cfg.crop_dims}")
    if not 0 < cfg.gamma_min <= cfg.gamma_max:
        raise ConfigError("gamma range must satisfy 0 < gamma_min <= gamma_max")
    for k, choices in _CHOICES.items():
        if getattr(cfg, k) not in choices:
            raise ConfigError(f"{k} must be one of {choices}, got {getattr(cfg, k)!r}")


# ---------------------------------------------------------------------------
# text form


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_triple(s: str):
    if s.lower() in ("", "none", "auto"):
        return None
    parts = [p for p in s.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated integers, got {s!r}")
    return tuple(int(p) for p in parts)


_FIELDS = {f.name: f for f in fields(TrainConfig)}
_ALIASES = {"eta": "pic_eta", "lr": "lr0", "ema": "ema_momentum"}
_KIND = {
    name: ("triple" if "tuple" in str(f.type) else
           "bool" if f.type in (bool, "bool") else
           "int" if f.type in (int, "int") else
           "float" if f.type in (float, "float") else "str")
    for name, f in _FIELDS.items()
}


def _convert(key: str, raw: str):
    kind = _KIND[key]
    if kind == "triple":
        return _parse_triple(raw)
    if kind == "bool":
        return _parse_bool(raw)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: malformed line (expected key = value)")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return TrainConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), str(path))


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def config_digest(cfg: TrainConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()
