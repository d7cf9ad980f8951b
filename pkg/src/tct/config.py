"""Run configuration: JSON sections with defaults, strict keys and type checks."""

from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .downstream import MODES, GBDTConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_parties: int = 2000
    fraud_fraction: float = 0.1
    seed: int = 1


@dataclass
class ModelSection:
    d: int = 32
    d_h: int = 32
    d_e: int = 32
    K_global: int | None = None
    L_local: int = 3
    horizons: int = 2
    context_mode: str = "last"
    static_context: bool = False
    precision: str = "float32"


@dataclass
class TrainSection:
    batch_size: int = 256
    epochs: int = 10
    max_lr: float = 1e-3
    weight_decay: float = 1e-2
    tau: float = 0.1
    seed: int = 1


@dataclass
class ClassifierSection(GBDTConfig):
    mode: str = "raw+emb"

    def gbdt(self) -> GBDTConfig:
        return GBDTConfig(**{f.name: getattr(self, f.name) for f in fields(GBDTConfig)})


@dataclass
class EvalSection:
    fpr_cap: float = 0.30
    alpha_flag: float = 0.5


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        m, t, e, d = self.model, self.train, self.eval, self.data
        checks = [
            (d.n_parties >= 1, "data.n_parties must be >= 1"),
            (0 <= d.fraud_fraction <= 1, "data.fraud_fraction must lie in [0, 1]"),
            (m.d == m.d_h, "model.d must equal model.d_h (the embedding is the context vector)"),
            (m.d_h >= 1 and m.d_e >= 1, "model dimensions must be positive"),
            (m.K_global is None or m.K_global >= 1, "model.K_global must be >= 1 or null"),
            (m.L_local >= 1, "model.L_local must be >= 1"),
            (m.horizons >= 1, "model.horizons must be >= 1"),
            (m.context_mode in ("last", "attention"), "model.context_mode must be 'last' or 'attention'"),
            (m.precision in ("float32", "float64"), "model.precision must be 'float32' or 'float64'"),
            (t.batch_size >= 2, "train.batch_size must be >= 2"),
            (t.epochs >= 1, "train.epochs must be >= 1"),
            (t.tau > 0, "train.tau must be > 0"),
            (t.max_lr > 0, "train.max_lr must be > 0"),
            (t.weight_decay >= 0, "train.weight_decay must be >= 0"),
            (self.classifier.mode in MODES, f"classifier.mode must be one of {MODES}"),
            (0 < e.fpr_cap <= 1, "eval.fpr_cap must lie in (0, 1]"),
            (0 <= e.alpha_flag <= 1, "eval.alpha_flag must lie in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def _check_type(value, tp, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return value
        tp = next(a for a in args if a is not type(None))
    ok = {
        bool: isinstance(value, bool),
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        str: isinstance(value, str),
    }[tp]
    if not ok:
        raise ConfigError(f"{path}: expected {tp.__name__}, got {type(value).__name__}")
    return float(value) if tp is float else value


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = RunConfig()
    sections = {f.name for f in fields(RunConfig)}
    for name, body in raw.items():
        if name not in sections:
            raise ConfigError(f"unknown key: {name}")
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: expected object")
        section = getattr(cfg, name)
        hints = typing.get_type_hints(type(section))
        for key, value in body.items():
            if key not in hints:
                raise ConfigError(f"unknown key: {name}.{key}")
            setattr(section, key, _check_type(value, hints[key], f"{name}.{key}"))
    try:
        cfg.classifier.gbdt()
    except ValueError as exc:
        raise ConfigError(f"classifier: {exc}") from None
    return cfg.validate()


def parse_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw)
