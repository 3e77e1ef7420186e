"""Run configuration: a YAML file with a fixed schema.

Unknown keys are errors, not warnings; a typo in a grid definition would
otherwise silently run the wrong experiment.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .harness import Thresholds
from .hooks import HookPoint
from .metrics import ClipPolicy
from .model import GenerationConfig, OptimizerConfig
from .trojans import INJECTED_THRESHOLD, REVEAL_THRESHOLD, PoisonSpec

OUTPUT_DIR_ENV = "TROJANFILTER_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_mlp: Optional[int] = None
    max_seq_len: int = 128
    init_std: float = 0.02


@dataclass(frozen=True)
class CorpusSection:
    """``source`` is ``synthetic`` or a path to a text file with one sample per line.

    The three splits are disjoint: base training (poisoned), clean filter
    training and clean validation.
    """

    source: str = "synthetic"
    n_train: int = 10000
    n_filter_train: int = 5000
    n_validation: int = 1500


@dataclass(frozen=True)
class GridSection:
    layers: Optional[list] = None
    hooks: Optional[list] = None
    ranks: Optional[list] = None
    model_id: str = "toy"
    training_id: str = "sgd-ce"
    samples_per_coordinate: int = 10


@dataclass(frozen=True)
class VerifySection:
    n: int = 10
    injected_threshold: float = INJECTED_THRESHOLD
    reveal_threshold: float = REVEAL_THRESHOLD


BASE_OPTIMIZER = OptimizerConfig(learning_rate=0.003, momentum=0.8, epochs=1, batch_size=4, algorithm="adam", grad_clip=1.0)


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    trojans: Optional[str] = None
    poison: PoisonSpec = field(default_factory=PoisonSpec)
    base_optimizer: OptimizerConfig = BASE_OPTIMIZER
    filter_optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    grid: GridSection = field(default_factory=GridSection)
    verify: VerifySection = field(default_factory=VerifySection)
    clip: ClipPolicy = field(default_factory=ClipPolicy)
    thresholds: Thresholds = field(default_factory=Thresholds)
    master_seed: int = 0
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything except ``output_dir``, which does not affect results."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}; allowed: {', '.join(sorted(fields))}")
    kwargs = {}
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(hints[name], value, key)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def _coerce(tp, value, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    return value


def _validate(cfg: RunConfig) -> RunConfig:
    g = cfg.grid
    if g.hooks is not None:
        for h in g.hooks:
            try:
                HookPoint(h)
            except ValueError:
                raise ConfigError(f"grid.hooks: unknown hook point {h!r}") from None
    for name in ("layers", "ranks"):
        for v in getattr(g, name) or []:
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ConfigError(f"grid.{name}: expected nonnegative integers, got {v!r}")
    for v in g.layers or []:
        if v >= cfg.model.n_layers:
            raise ConfigError(f"grid.layers: layer {v} out of range for {cfg.model.n_layers} layers")
    if g.samples_per_coordinate < 1:
        raise ConfigError("grid.samples_per_coordinate: must be >= 1")
    for name in ("injected_threshold", "reveal_threshold"):
        if not 0 <= getattr(cfg.verify, name) <= 1:
            raise ConfigError(f"verify.{name}: must be in [0, 1]")
    if cfg.verify.n < 1:
        raise ConfigError("verify.n: must be >= 1")
    for name in ("n_train", "n_filter_train", "n_validation"):
        if getattr(cfg.corpus, name) < 1:
            raise ConfigError(f"corpus.{name}: must be >= 1")
    return cfg


def from_dict(data: dict | None) -> RunConfig:
    return _validate(_build(RunConfig, data or {}, ""))


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a YAML config; ``None`` gives all defaults."""
    if path is None:
        return from_dict({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from None
    return from_dict(data)
