"""Run configuration: a validated dataclass tree loaded from YAML.

Unknown keys are rejected (fail-fast, before any work), and CLI flags can
override leaves through dotted paths (``teca.ls=false``). The fully
resolved tree is snapshotted into every report so runs are self-describing.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augment import AUG_OPS, AugChainSpec
from .corruptions import CORRUPTION_KINDS
from .errors import ConfigError

METHOD_KINDS = ("source", "input_adapt", "bn_adapt", "tent", "eata", "cotta")
UPDATE_RANGES = ("both", "classifier", "enhancer")
ENHANCER_GROUPS = ("enhancer_all", "enhancer_bn_affine")

# Desk-scale learning-rate defaults, calibrated once and frozen.
DEFAULT_METHOD_LR = {"tent": 1e-3, "eata": 1e-3, "cotta": 1e-2}


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    n_train: int = 4000
    n_test: int = 1000
    path: str | None = None
    format: str = "binary"


@dataclass
class CorruptionConfig:
    kinds: list[str] = field(default_factory=lambda: list(CORRUPTION_KINDS))
    severities: list[int] = field(default_factory=lambda: [5])
    n_per_cell: int = 500


@dataclass
class ClassifierConfig:
    epochs: int = 12
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    augment: bool = True
    label_smoothing: float = 0.1


@dataclass
class AugConfig:
    ops: list[str] = field(default_factory=lambda: list(AUG_OPS))
    width: int = 3
    depth: int = 2

    def to_spec(self) -> AugChainSpec:
        return AugChainSpec(ops=tuple(self.ops), width=self.width, depth=self.depth)


@dataclass
class EnhancerConfig:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    filter_fraction: float = 0.5
    aug: AugConfig = field(default_factory=AugConfig)


@dataclass
class EataConfig:
    entropy_margin_scale: float = 0.4
    anchor_weight: float = 1.0
    fisher_batches: int = 4


@dataclass
class CottaConfig:
    views: int = 8
    ema_alpha: float = 0.999
    confidence_threshold: float = 0.72
    restore_prob: float = 0.01


@dataclass
class MethodConfig:
    kind: str = "tent"
    lr: float | None = None
    momentum: float = 0.9
    eata: EataConfig = field(default_factory=EataConfig)
    cotta: CottaConfig = field(default_factory=CottaConfig)

    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return DEFAULT_METHOD_LR.get(self.kind, 0.0)


@dataclass
class TecaConfig:
    enabled: bool = False
    ls: bool = True
    spus: bool = True
    fbns: bool = True
    update_range: str = "both"
    enhancer_group: str = "enhancer_all"


@dataclass
class ProtocolConfig:
    kind: str = "standard"
    severity: int = 5
    batch_size: int = 50
    n_trials: int = 10
    delta: float = 0.1
    episodic: bool = False


@dataclass
class RunConfig:
    master_seed: int = 0
    run_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs/default"
    threads: int = 2
    dump_images: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    corruptions: CorruptionConfig = field(default_factory=CorruptionConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    teca: TecaConfig = field(default_factory=TecaConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        if self.dataset.kind not in ("synthetic", "external"):
            raise ConfigError(f"dataset.kind must be synthetic or external, got {self.dataset.kind!r}")
        if self.dataset.kind == "external" and not self.dataset.path:
            raise ConfigError("dataset.path is required for external datasets")
        if self.method.kind not in METHOD_KINDS:
            raise ConfigError(f"method.kind must be one of {METHOD_KINDS}, got {self.method.kind!r}")
        if self.teca.update_range not in UPDATE_RANGES:
            raise ConfigError(f"teca.update_range must be one of {UPDATE_RANGES}")
        if self.teca.enhancer_group not in ENHANCER_GROUPS:
            raise ConfigError(f"teca.enhancer_group must be one of {ENHANCER_GROUPS}")
        if self.teca.enabled and self.method.kind in ("source", "input_adapt"):
            raise ConfigError(f"teca cannot wrap frozen method {self.method.kind!r}")
        for k in self.corruptions.kinds:
            if k not in CORRUPTION_KINDS:
                raise ConfigError(f"unknown corruption kind {k!r}")
        for s in self.corruptions.severities:
            if s not in (1, 2, 3, 4, 5):
                raise ConfigError(f"severity must be 1..5, got {s}")
        if self.protocol.kind not in ("standard", "gradual", "diverse", "ptta"):
            raise ConfigError(f"unknown protocol {self.protocol.kind!r}")
        if self.protocol.delta <= 0:
            raise ConfigError("protocol.delta must be positive")
        if self.classifier.epochs < 1 or self.enhancer.epochs < 1:
            raise ConfigError("training epochs must be >= 1")
        if not self.run_seeds:
            raise ConfigError("run_seeds must be non-empty")
        try:
            self.enhancer.aug.to_spec()  # leakage guard and op validation
        except Exception as e:
            raise ConfigError(f"enhancer.aug invalid: {e}") from e
        return self


def _from_dict(cls, data: dict, path: str = "") -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at {path or '<root>'}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - field_names
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        hint = hints.get(name)
        if isinstance(hint, type) and dataclasses.is_dataclass(hint):
            kwargs[name] = _from_dict(hint, value, sub)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad config at {path or '<root>'}: {e}") from e


def config_from_dict(data: dict | None) -> RunConfig:
    return _from_dict(RunConfig, data or {}).validate()


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key.path=value`` overrides; values are parsed as YAML scalars."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value, got {item!r}")
        key, _, raw = item.partition("=")
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config path: {key!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config path: {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)
