"""Experiment configuration files.

A config is a JSON object with five top-level keys::

    {
      "seed": 0,
      "output_dir": "runs/demo",
      "model": {"separator": {...}, "codec": {...}, "chunk": {...}},
      "training": {..., "hct": {...}},
      "data": {"synth": {...}, "dataset_dir": null}
    }

Every section is optional except ``seed``; missing keys take the desk-scale
defaults. Unknown keys and wrongly typed values are rejected, since a
misspelled hyperparameter that silently falls back to its default is the
easiest way to ruin a comparison.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .codec import ChunkConfig, CodecConfig
from .separator import ModelConfig, SeparatorConfig
from .signal import SynthConfig
from .training import TrainConfig

DEFAULT_SPARSE_RATIOS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

# spawn keys under the root seed; one independent stream per consumer
_DATA_STREAM = 0
_INIT_STREAM = 1
_TRAIN_STREAM = 2
SPLITS = ("train", "val", "test", "sparse")


class ConfigError(ValueError):
    pass


@dataclass
class SynthSection:
    """Toy-data settings: the mixture generator plus split sizes."""

    num_sources: int = 2
    duration_seconds: float = 1.0
    gain_db_range: tuple[float, float] = (-33.0, -25.0)
    source_profiles: list[tuple[float, float]] = field(default_factory=lambda: [(200.0, 800.0), (1200.0, 2400.0)])
    num_train: int = 500
    num_val: int = 50
    num_test: int = 50
    sparse_ratios: list[float] = field(default_factory=lambda: list(DEFAULT_SPARSE_RATIOS))
    num_sparse: int = 10

    def __post_init__(self):
        for name in ("num_train", "num_val", "num_test", "num_sparse"):
            if getattr(self, name) < 0:
                raise ConfigError(f"data.synth.{name} must be nonnegative")
        if self.num_train < 1 or self.num_val < 1:
            raise ConfigError("need at least one training and one validation example")
        for r in self.sparse_ratios:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"sparse ratio {r} outside [0, 1]")
        if self.num_sparse and self.sparse_ratios and self.num_sources != 2:
            raise ConfigError("sparse mixtures need num_sources == 2; set num_sparse to 0 otherwise")
        self.generator(0)  # validates bands, gains and duration

    def generator(self, seed: int) -> SynthConfig:
        return SynthConfig(
            num_sources=self.num_sources,
            duration_seconds=self.duration_seconds,
            gain_db_range=tuple(self.gain_db_range),
            source_profiles=[tuple(b) for b in self.source_profiles],
            seed=seed,
        )

    def split_size(self, split: str) -> int:
        return {"train": self.num_train, "val": self.num_val, "test": self.num_test}[split]


@dataclass
class DataSection:
    synth: SynthSection = field(default_factory=SynthSection)
    dataset_dir: str | None = None


@dataclass
class ExperimentConfig:
    seed: int
    model: ModelConfig = field(default_factory=ModelConfig.build)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    output_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "data": _plain(dataclasses.asdict(self.data)),
        }

    def seed_sequence(self, stream: int, *sub: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(stream, *sub))

    def data_rng(self, split: str) -> np.random.Generator:
        return np.random.default_rng(self.seed_sequence(_DATA_STREAM, SPLITS.index(split)))

    def init_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed_sequence(_INIT_STREAM))

    def train_seed(self) -> int:
        return int(self.seed_sequence(_TRAIN_STREAM).generate_state(1)[0])

    def with_overrides(self, seed: int | None = None, hct: bool | None = None, head: str | None = None):
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if hct is not None:
            training = dataclasses.replace(cfg.training, hct=dataclasses.replace(cfg.training.hct, enabled=hct))
            cfg = dataclasses.replace(cfg, training=training)
        if head is not None:
            sep = dataclasses.replace(cfg.model.separator, head=head)
            codec = dataclasses.replace(cfg.model.codec, encoder_activation=_activation_for(head))
            cfg = dataclasses.replace(cfg, model=ModelConfig(sep, codec, cfg.model.chunk))
        return cfg


def _plain(value):
    """Tuples to lists, recursively, so a dict survives a JSON round trip unchanged."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _activation_for(head: str) -> str:
    return "relu" if head == "masking" else "none"


# ---------------------------------------------------------------------------
# strict parsing


def _check_type(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return None
        hint = next(h for h in options if h is not type(None))
        origin = typing.get_origin(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        args = typing.get_args(hint)
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
            return tuple(_check_type(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        inner = args[0] if args else Any
        items = [_check_type(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    return value


def _build(cls, raw: Any, where: str, skip: tuple[str, ...] = ()):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {raw!r}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.name not in skip]
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(names)}")
    kwargs = {k: _check_type(v, hints[k], f"{where}.{k}") for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _build_model(raw: Any) -> ModelConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"model: expected an object, got {raw!r}")
    unknown = sorted(set(raw) - {"separator", "codec", "chunk"})
    if unknown:
        raise ConfigError(f"model: unknown key(s) {', '.join(unknown)}")
    sep = _build(SeparatorConfig, raw.get("separator", {}), "model.separator")
    codec_raw = dict(raw.get("codec", {})) if isinstance(raw.get("codec", {}), dict) else raw["codec"]
    if isinstance(codec_raw, dict):
        # the filter count and the activation follow from the separator unless spelled out
        codec_raw.setdefault("n_filters", sep.feature_dim)
        codec_raw.setdefault("encoder_activation", _activation_for(sep.head))
    codec = _build(CodecConfig, codec_raw, "model.codec")
    chunk = _build(ChunkConfig, raw.get("chunk", {}), "model.chunk")
    try:
        return ModelConfig(sep, codec, chunk)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def parse_config(raw: Any, base_dir: Path | None = None, check_paths: bool = True) -> ExperimentConfig:
    """Validate a decoded JSON object; relative paths resolve against ``base_dir``.

    ``check_paths=False`` skips the existence check on ``data.dataset_dir``,
    for the command that is about to create it.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {"seed", "output_dir", "model", "training", "data"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    if "seed" not in raw:
        raise ConfigError("seed is mandatory")
    seed = _check_type(raw["seed"], int, "seed")
    if seed < 0:
        raise ConfigError("seed must be nonnegative")
    output_dir = _check_type(raw.get("output_dir"), str | None, "output_dir")
    model = _build_model(raw.get("model", {}))
    training = _build(TrainConfig, raw.get("training", {}), "training")
    data = _build(DataSection, raw.get("data", {}), "data")
    if data.dataset_dir is not None:
        path = Path(data.dataset_dir)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if check_paths and not path.is_dir():
            raise ConfigError(f"data.dataset_dir {data.dataset_dir!r} does not exist")
        data = dataclasses.replace(data, dataset_dir=str(path))
    if output_dir is not None and base_dir is not None and not Path(output_dir).is_absolute():
        output_dir = str(base_dir / output_dir)
    return ExperimentConfig(seed=seed, model=model, training=training, data=data, output_dir=output_dir)


def load_config(path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, base_dir=path.parent, check_paths=check_paths)
