"""Run configuration and its flat ``section.key = value`` text form."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Tuple

from .augmentation import AugmentPolicy
from .contrastive import LossVariant
from .encoders import BackboneConfig
from .errors import ConfigError
from .partitioning import PartitionSpec


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 100
    plateau_patience: int = 10
    plateau_threshold: float = 1e-3
    val_fraction: float = 0.1
    seed: int = 0
    deterministic: bool = True
    num_workers: int = 0


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 300
    batch_size: int = 64
    backbone_lr: float = 1e-4
    head_lr: float = 1e-3
    weight_decay: float = 1e-5
    plateau_patience: int = 10
    stride: int = 3
    num_classes: int = 0  # 0: infer from labels
    ops: Tuple[str, ...] = ("crop", "hflip", "color_jitter")
    val_fraction: float = 0.1


@dataclass(frozen=True)
class ProbeConfig:
    freeze: str = "agg"
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    milestones: Tuple[float, ...] = (0.6, 0.8)
    ops: Tuple[str, ...] = ("crop", "hflip")


@dataclass(frozen=True)
class RunConfig:
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossVariant = field(default_factory=LossVariant)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        self.augment.check(self.loss.use_spatial_negatives)
        if self.loss.use_spatial_negatives and self.backbone.spatial_map != "grid4x4":
            raise ConfigError("spatial negatives need backbone.spatial_map = grid4x4")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not self.train.lr > 0:
            raise ConfigError("train.lr must be positive")
        if self.loss.kind == "bidirectional" and not self.partition.bidirectional:
            raise ConfigError("bidirectional loss needs n_past >= 1 and n_future >= 1")

    # -- flat form -------------------------------------------------------

    def to_flat(self) -> Dict[str, object]:
        out = {}
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                out[f"{sec.name}.{f.name}"] = getattr(obj, f.name)
        return out

    @classmethod
    def from_flat(cls, values: Dict[str, object], base: "RunConfig" = None) -> "RunConfig":
        base = cls() if base is None else base
        sections = {s.name: {} for s in dataclasses.fields(base)}
        for key, raw in values.items():
            sec, _, name = key.partition(".")
            if sec not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(base, sec)
            names = {f.name for f in dataclasses.fields(obj)}
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = _coerce(key, raw, getattr(obj, name))
        try:
            built = {
                sec: dataclasses.replace(getattr(base, sec), **kw) if kw else getattr(base, sec)
                for sec, kw in sections.items()
            }
            return cls(**built)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_flat().items())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) and isinstance(raw, list) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            if text.startswith("["):
                items = json.loads(text)
            else:
                items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(t) for t in items)
            return tuple(items)
        if text.lower() in ("none", "null"):
            return None
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if default is None:  # optional int such as crop_size
            return int(text)
        return text
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def parse_text(text: str) -> Dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a config file (optional) and apply ``key=value`` overrides after it."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        values.update(parse_text(p.read_text()))
    values.update(parse_overrides(overrides))
    return RunConfig.from_flat(values)
