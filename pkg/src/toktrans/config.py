"""Experiment configuration files (JSON) with strict validation."""

from __future__ import annotations

import json
import os
import types
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .train import RunConfig, config_hash


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass
class Paths:
    source_corpus: str | None = None
    target_corpus: str | None = None
    eval_corpus: str | None = None
    tokenizer: str | None = None
    source_checkpoint: str | None = None
    out_dir: str = "runs"


@dataclass
class ModelSpec:
    d: int = 128
    n_layers: int = 4
    n_heads: int = 4
    pretrain_steps: int = 500
    pretrain_lr: float = 3e-3


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    paths: Paths = field(default_factory=Paths)
    model: ModelSpec = field(default_factory=ModelSpec)
    seed: int = 0
    target_vocab: int = 512
    seeds: list[int] = field(default_factory=lambda: [0])
    finetune_steps: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _check_type(value, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        for a in args:
            try:
                return _check_type(value, a, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: {value!r} does not match {tp}")
    if tp is type(None):
        if value is not None:
            raise ConfigError(f"{where}: expected null")
        return None
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_check_type(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type {tp}")


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in doc.items():
        tp = hints[name]
        if isinstance(tp, type) and hasattr(tp, "__dataclass_fields__"):
            kwargs[name] = _build(tp, value, f"{where}.{name}")
        else:
            kwargs[name] = _check_type(value, tp, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(doc: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, doc, "config")


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return config_from_dict(doc)


def default_seed() -> int:
    raw = os.environ.get("TOKTRANS_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"TOKTRANS_SEED must be an integer, got {raw!r}") from e


def verify_config_hash(metadata: dict) -> bool:
    """True when the stored config still hashes to the stored hash."""
    cfg = metadata.get("config_doc")
    return cfg is not None and config_hash(cfg) == metadata.get("config_hash")
