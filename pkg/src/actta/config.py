"""Experiment configuration: a YAML file validated into dataclasses.

Validation errors carry the dotted path of the offending key, e.g.
``dataset.n_classes``. ``to_dict`` and ``from_dict`` round-trip exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .activation import BaseActivationKind
from .adapt import AdaptConfig, Selection
from .errors import ActtaError, ConfigError
from .network import GROUPS, ParamGroupSelection
from .shiftgen import CORRUPTIONS, CorruptionSpec, DatasetSpec


@dataclass
class ModelConfig:
    hidden: List[int] = field(default_factory=lambda: [64, 64, 64])
    norm: str = "batch"
    base: str = "relu"
    granularity: str = "channel"
    depth_ratio: float = 1.0


@dataclass
class PretrainConfig:
    epochs: int = 200
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0


@dataclass
class AdaptSection:
    optimizer: str = "adam"
    base_lr: float = 1e-3
    group_lr_multipliers: Dict[str, float] = field(
        default_factory=lambda: {"c": 10.0, "lambda_neg": 10.0, "lambda_pos": 10.0}
    )
    batch_size: int = 64
    n_batches: int = 50
    groups: str = "actta_star"
    selection: Optional[Dict[str, Any]] = None
    schedule: str = "episodic"
    corruption: str = "mean_shift"
    severity: int = 5
    continual: List[str] = field(default_factory=lambda: list(CORRUPTIONS))
    steps_per_batch: int = 1
    seed: int = 0

    def to_adapt_config(self) -> AdaptConfig:
        sel = Selection(**self.selection) if self.selection else None
        return AdaptConfig(
            optimizer=self.optimizer,
            base_lr=self.base_lr,
            group_lr_multipliers=dict(self.group_lr_multipliers),
            batch_size=self.batch_size,
            selection=sel,
            schedule=self.schedule,
            steps_per_batch=self.steps_per_batch,
            seed=self.seed,
            adapt=self.groups != "none",
        )

    def corruption_spec(self, kind: Optional[str] = None) -> CorruptionSpec:
        return CorruptionSpec(kind or self.corruption, self.severity, seed=self.seed)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return {
            "dataset": asdict(self.dataset),
            "model": asdict(self.model),
            "pretrain": asdict(self.pretrain),
            "adapt": asdict(self.adapt),
            "output_dir": self.output_dir,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ExperimentConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a mapping")
        _reject_unknown(d, {"dataset", "model", "pretrain", "adapt", "output_dir"}, "")
        cfg = cls(
            dataset=_section(DatasetSpec, d.get("dataset"), "dataset"),
            model=_section(ModelConfig, d.get("model"), "model"),
            pretrain=_section(PretrainConfig, d.get("pretrain"), "pretrain"),
            adapt=_section(AdaptSection, d.get("adapt"), "adapt"),
            output_dir=str(d.get("output_dir", "out")),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
        try:
            return cls.from_dict(yaml.safe_load(text))
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"not valid YAML: {exc}") from exc

    def validate(self) -> None:
        ds = self.dataset
        _check(ds.n_samples >= 2, "dataset.n_samples", "must be >= 2")
        _check(ds.dims >= 1, "dataset.dims", "must be >= 1")
        _check(ds.n_classes >= 2, "dataset.n_classes", "must be >= 2")
        _check(ds.n_samples >= ds.n_classes, "dataset.n_samples", "must be at least n_classes")
        _check(ds.class_separation > 0, "dataset.class_separation", "must be positive")
        _check(ds.noise_sigma >= 0, "dataset.noise_sigma", "must be non-negative")
        _check(ds.seed >= 0, "dataset.seed", "must be a non-negative integer")

        m = self.model
        _check(len(m.hidden) >= 1 and all(h >= 1 for h in m.hidden), "model.hidden", "needs positive widths")
        _check(m.norm in ("batch", "layer", "none"), "model.norm", "must be batch, layer or none")
        try:
            BaseActivationKind.parse(m.base)
        except ActtaError as exc:
            raise ConfigError("model.base", str(exc)) from None
        _check(m.granularity in ("layer", "channel", "element"), "model.granularity", "must be layer, channel or element")
        _check(0.0 <= m.depth_ratio <= 1.0, "model.depth_ratio", "must lie in [0, 1]")

        p = self.pretrain
        _check(p.epochs >= 0, "pretrain.epochs", "must be >= 0")
        _check(p.lr > 0, "pretrain.lr", "must be positive")
        _check(0.0 <= p.momentum < 1.0, "pretrain.momentum", "must lie in [0, 1)")
        _check(p.batch_size >= 2, "pretrain.batch_size", "must be >= 2")

        a = self.adapt
        _check(a.optimizer in ("adam", "sgd"), "adapt.optimizer", "must be adam or sgd")
        _check(a.base_lr >= 0, "adapt.base_lr", "must be >= 0")
        for g, v in a.group_lr_multipliers.items():
            _check(g in GROUPS, f"adapt.group_lr_multipliers.{g}", f"unknown group; expected one of {GROUPS}")
            _check(isinstance(v, (int, float)) and v > 0, f"adapt.group_lr_multipliers.{g}", "must be positive")
        _check(a.batch_size >= 2, "adapt.batch_size", "must be >= 2")
        _check(a.n_batches >= 1, "adapt.n_batches", "must be >= 1")
        if a.groups != "none":
            try:
                ParamGroupSelection.preset(a.groups)
            except ActtaError as exc:
                raise ConfigError("adapt.groups", str(exc)) from None
        if a.selection is not None:
            _check(isinstance(a.selection, dict), "adapt.selection", "must be a mapping or null")
            _reject_unknown(a.selection, {"e0_factor", "weighting"}, "adapt.selection")
            e0 = a.selection.get("e0_factor", 0.4)
            _check(isinstance(e0, (int, float)) and 0 < e0 <= 1, "adapt.selection.e0_factor", "must lie in (0, 1]")
        _check(a.schedule in ("episodic", "continual"), "adapt.schedule", "must be episodic or continual")
        _check(a.corruption in CORRUPTIONS, "adapt.corruption", f"must be one of {CORRUPTIONS}")
        _check(1 <= a.severity <= 5, "adapt.severity", "must be an integer in 1..5")
        _check(len(a.continual) >= 1, "adapt.continual", "needs at least one corruption")
        for i, k in enumerate(a.continual):
            _check(k in CORRUPTIONS, f"adapt.continual[{i}]", f"must be one of {CORRUPTIONS}")
        _check(a.steps_per_batch >= 1, "adapt.steps_per_batch", "must be >= 1")
        _check(a.seed >= 0, "adapt.seed", "must be a non-negative integer")
        _check(bool(self.output_dir), "output_dir", "must be a non-empty path")


def _check(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(key, message)


def _reject_unknown(d: dict, known: set, prefix: str) -> None:
    for k in d:
        if k not in known:
            raise ConfigError(f"{prefix}.{k}" if prefix else str(k), "unknown key")


def _section(cls, data, prefix: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(prefix, "must be a mapping")
    names = {f.name: f for f in fields(cls)}
    _reject_unknown(data, set(names), prefix)
    defaults = cls()
    kwargs = {}
    for k, v in data.items():
        want = type(getattr(defaults, k))
        key = f"{prefix}.{k}"
        if v is None:
            if getattr(defaults, k) is not None:
                raise ConfigError(key, "must not be null")
            kwargs[k] = None
        elif isinstance(v, bool):
            raise ConfigError(key, f"expected {want.__name__}, got {type(v).__name__}")
        elif want is float and isinstance(v, (int, float)):
            kwargs[k] = float(v)
        elif want is int and isinstance(v, int):
            kwargs[k] = v
        elif want in (str, list, dict) and isinstance(v, want):
            kwargs[k] = v
        elif getattr(defaults, k) is None:
            kwargs[k] = v
        else:
            raise ConfigError(key, f"expected {want.__name__}, got {type(v).__name__}")
    return cls(**kwargs)
