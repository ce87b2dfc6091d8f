"""Run configuration: typed sections, flat dotted key-value files.

File format, one assignment per line::

    # comment
    dsp.n_mels = 128
    distill.tau_t = 0.07
    train.recons = true

Precedence is defaults < file < overrides. Unknown keys and values that
do not parse as the field's type are rejected with :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .corrupt import CorruptionConfig
from .distill import DistillConfig
from .dsp import DspConfig
from .errors import ConfigError
from .vit import VARIANTS, BackboneConfig

RUN_ROOT_ENV = "ASIT_RUN_ROOT"


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    final_lr: float = 1e-6
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    wd_start: float = 0.04
    wd_end: float = 0.4
    batch_size: int = 16
    epochs: int = 30
    recons: bool = True
    lcl: bool = True
    gcl: bool = True
    checkpoint_every: int = 1
    num_workers: int = 0

    def validate(self) -> None:
        if self.base_lr <= 0 or self.final_lr < 0:
            raise ConfigError("train.base_lr must be > 0 and train.final_lr >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("train.warmup_frac must lie in [0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1/beta2 must lie in [0, 1)")
        if self.wd_start < 0 or self.wd_end < 0:
            raise ConfigError("weight decay must be non-negative")
        if not (self.recons or self.lcl or self.gcl):
            raise ConfigError("train.recons, train.lcl and train.gcl cannot all be false")
        if self.checkpoint_every < 1 or self.num_workers < 0:
            raise ConfigError("train.checkpoint_every must be >= 1 and train.num_workers >= 0")

    @property
    def toggles(self) -> dict:
        return {"recons": self.recons, "lcl": self.lcl, "gcl": self.gcl}


@dataclass
class ProbeConfig:
    lr: float = 0.01
    epochs: int = 100
    # minibatch size for the linear probe; 0 means full batch
    batch_size: int = 32
    # seed for the minibatch order
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    standardize: bool = True
    # "cls" (class token) or "mean" (mean of data tokens)
    pooling: str = "cls"
    finetune_lr: float = 1e-4
    finetune_epochs: int = 5
    finetune_batch_size: int = 16
    finetune_weight_decay: float = 0.05
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.lr <= 0 or self.finetune_lr <= 0:
            raise ConfigError("probe learning rates must be positive")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("probe epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("probe.momentum must lie in [0, 1)")
        if self.pooling not in ("cls", "mean"):
            raise ConfigError("probe.pooling must be 'cls' or 'mean'")
        if self.batch_size < 0:
            raise ConfigError("probe.batch_size must be >= 0")
        if self.finetune_batch_size < 1:
            raise ConfigError("probe.finetune_batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("probe.val_fraction must lie in [0, 1)")


@dataclass
class RunSection:
    seed: int = 0
    run_root: str = ""
    run_name: str = ""
    manifest: str = ""
    checkpoint: str = ""
    cache_dir: str = ""

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("run.seed must be >= 0")

    @property
    def resolved_root(self) -> Path:
        return Path(self.run_root or os.environ.get(RUN_ROOT_ENV, "runs"))


SECTIONS = {
    "dsp": DspConfig,
    "corrupt": CorruptionConfig,
    "backbone": BackboneConfig,
    "distill": DistillConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
    "run": RunSection,
}


@dataclass
class RunConfig:
    dsp: DspConfig = field(default_factory=DspConfig)
    corrupt: CorruptionConfig = field(default_factory=CorruptionConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    run: RunSection = field(default_factory=RunSection)
    provenance: dict = field(default_factory=dict, compare=False)

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        if self.dsp.target_frames < self.backbone.patch_size:
            raise ConfigError("dsp.target_frames must be at least one patch long")
        return self

    @property
    def input_shape(self) -> tuple[int, int]:
        return self.dsp.target_frames, self.dsp.n_mels

    def flat(self) -> dict:
        return {f"{name}.{f.name}": getattr(getattr(self, name), f.name)
                for name in SECTIONS for f in dataclasses.fields(SECTIONS[name])}

    def fingerprint(self) -> str:
        return hashlib.sha256(serialize_config(self, with_provenance=False).encode()).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw, kind):
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
            return raw
        raw = str(raw)
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None
    return text


def _field_types(section_cls) -> dict:
    types = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: types[f.type if isinstance(f.type, str) else f.type.__name__] for f in dataclasses.fields(section_cls)}


def read_assignments(path) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip()))
    return out


def build_config(assignments) -> RunConfig:
    """Apply ``(key, value)`` pairs in order on top of the defaults and validate.

    ``backbone.variant`` is applied first so explicit depth/width keys win over
    the variant preset.
    """
    assignments = list(assignments)
    cfg = RunConfig()
    variants = [v for k, v in assignments if k == "backbone.variant"]
    if variants:
        variant = str(variants[-1]).strip()
        if variant not in VARIANTS:
            raise ConfigError(f"backbone.variant: unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        cfg.backbone = BackboneConfig.from_variant(variant)
    for key, raw in assignments:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        types = _field_types(SECTIONS[section])
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(getattr(cfg, section), name, _coerce(key, raw, types[name]))
    return cfg.validate()


def parse_config(path=None, overrides=None) -> RunConfig:
    """defaults < file < overrides (a mapping or a list of ``key=value`` strings)."""
    assignments = read_assignments(path) if path else []
    over = []
    if isinstance(overrides, dict):
        over = list(overrides.items())
    elif overrides:
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            k, v = item.split("=", 1)
            over.append((k.strip(), v.strip()))
    cfg = build_config(assignments + over)
    cfg.provenance = {"file": str(path) if path else None, "overrides": [f"{k}={v}" for k, v in over]}
    return cfg


def serialize_config(cfg: RunConfig, with_provenance: bool = True) -> str:
    lines = []
    if with_provenance and cfg.provenance:
        lines.append(f"# source file: {cfg.provenance.get('file')}")
        for item in cfg.provenance.get("overrides", []):
            lines.append(f"# override: {item}")
    for key, value in cfg.flat().items():
        lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize_config(cfg))
