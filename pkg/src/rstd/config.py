"""Experiment configuration: a strict YAML schema.

Example
-------
::

    dataset:
      path: /data/cifar10        # optional; falls back to $RSTD_DATA_DIR
      noise_dev: 0.0
      noise_seed: 7
      train_per_class: 200       # optional first-k-per-class subsetting
      test_per_class: 100
    model:
      channels: 32
      compression:               # optional; omitted layers stay dense
        - layers: [2, 3, 4, 5, 6, 7]
          kind: tr               # tt | tt-matrix | tr
          ranks: [1, 1, 1, 1]
          shuffled: true
          # seed: 99             # optional fixed permutation seed
    training:
      epochs: 20
      base_lr: 0.1
      momentum: 0.9
      milestones: [12, 17]
      decay_factor: 10.0
      batch_size: 128
      repetitions: 3
      seed: 42
      precision: f32             # f32 | f64
    output:
      directory: out
      csv: metrics.csv

Validation is strict: unknown keys anywhere are rejected, and every error
names the offending section/field.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import yaml

from .nn import LayerCompression, TABLE1_STRIDES
from .tdmodel import KIND_TR, KIND_TT, KIND_TT_MATRIX
from .trainer import TrainConfig

ENV_DATA_DIR = "RSTD_DATA_DIR"
_KINDS = (KIND_TT, KIND_TT_MATRIX, KIND_TR)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names section and field."""


def _require_mapping(obj, where):
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(obj).__name__}")
    return dict(obj)


def _reject_unknown(d, where):
    if d:
        raise ConfigError(f"{where}: unknown key(s) {sorted(d)}")


def _take(d, key, where, kind, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{where}.{key}: required field is missing")
        return default
    val = d.pop(key)
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if kind is int and isinstance(val, bool):
        raise ConfigError(f"{where}.{key}: expected int, got bool")
    if not isinstance(val, kind):
        raise ConfigError(
            f"{where}.{key}: expected {kind.__name__}, got {type(val).__name__}"
        )
    return val


def _take_int_list(d, key, where, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{where}.{key}: required field is missing")
        return default
    val = d.pop(key)
    if not isinstance(val, list) or not all(
        isinstance(v, int) and not isinstance(v, bool) for v in val
    ):
        raise ConfigError(f"{where}.{key}: expected a list of ints")
    return tuple(val)


@dataclass(frozen=True)
class CompressionEntry:
    layers: tuple[int, ...]
    kind: str
    ranks: tuple[int, ...]
    shuffled: bool = False
    seed: int | None = None


@dataclass(frozen=True)
class DatasetSection:
    path: str | None = None
    noise_dev: float = 0.0
    noise_seed: int = 0
    train_per_class: int | None = None
    test_per_class: int | None = None

    def resolved_path(self) -> str:
        path = self.path or os.environ.get(ENV_DATA_DIR)
        if not path:
            raise ConfigError(
                f"dataset.path: not set and ${ENV_DATA_DIR} is empty"
            )
        return path


@dataclass(frozen=True)
class ModelSection:
    channels: int = 256
    compression: tuple[CompressionEntry, ...] = ()


@dataclass(frozen=True)
class OutputSection:
    directory: str = "out"
    csv: str = "metrics.csv"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainConfig = field(default_factory=TrainConfig)
    precision: str = "f32"
    output: OutputSection = field(default_factory=OutputSection)

    def compression_map(self) -> dict[int, LayerCompression]:
        out: dict[int, LayerCompression] = {}
        for entry in self.model.compression:
            for layer in entry.layers:
                out[layer] = LayerCompression(
                    kind=entry.kind, ranks=entry.ranks,
                    shuffled=entry.shuffled, seed=entry.seed,
                )
        return out


def _parse_compression(entries, where) -> tuple[CompressionEntry, ...]:
    if entries is None:
        return ()
    if not isinstance(entries, list):
        raise ConfigError(f"{where}: expected a list of compression entries")
    parsed = []
    seen_layers: set[int] = set()
    n_convs = len(TABLE1_STRIDES)
    for i, raw in enumerate(entries):
        here = f"{where}[{i}]"
        d = _require_mapping(raw, here)
        layers = _take_int_list(d, "layers", here,
                                default=tuple(range(2, n_convs + 1)))
        kind = _take(d, "kind", here, str, required=True)
        ranks = _take_int_list(d, "ranks", here, required=True)
        shuffled = _take(d, "shuffled", here, bool, default=False)
        seed = _take(d, "seed", here, int, default=None)
        _reject_unknown(d, here)
        if kind not in _KINDS:
            raise ConfigError(f"{here}.kind: {kind!r} is not one of {_KINDS}")
        for layer in layers:
            if layer == 1:
                raise ConfigError(f"{here}.layers: layer 1 is never compressed")
            if not 2 <= layer <= n_convs:
                raise ConfigError(f"{here}.layers: no convolution layer {layer}")
            if layer in seen_layers:
                raise ConfigError(f"{here}.layers: layer {layer} listed twice")
            seen_layers.add(layer)
        if any(r < 1 for r in ranks):
            raise ConfigError(f"{here}.ranks: ranks must be >= 1")
        parsed.append(CompressionEntry(layers=layers, kind=kind, ranks=ranks,
                                       shuffled=shuffled, seed=seed))
    return tuple(parsed)


def parse_config(doc: dict) -> ExperimentConfig:
    top = _require_mapping(doc, "config")

    d = _require_mapping(top.pop("dataset", None), "dataset")
    dataset = DatasetSection(
        path=_take(d, "path", "dataset", str),
        noise_dev=_take(d, "noise_dev", "dataset", float, default=0.0),
        noise_seed=_take(d, "noise_seed", "dataset", int, default=0),
        train_per_class=_take(d, "train_per_class", "dataset", int),
        test_per_class=_take(d, "test_per_class", "dataset", int),
    )
    _reject_unknown(d, "dataset")
    if dataset.noise_dev < 0:
        raise ConfigError("dataset.noise_dev: must be >= 0")

    m = _require_mapping(top.pop("model", None), "model")
    model = ModelSection(
        channels=_take(m, "channels", "model", int, default=256),
        compression=_parse_compression(m.pop("compression", None),
                                       "model.compression"),
    )
    _reject_unknown(m, "model")
    if model.channels < 1:
        raise ConfigError("model.channels: must be >= 1")

    t = _require_mapping(top.pop("training", None), "training")
    precision = _take(t, "precision", "training", str, default="f32")
    if precision not in ("f32", "f64"):
        raise ConfigError(f"training.precision: {precision!r} is not f32 or f64")
    try:
        training = TrainConfig(
            base_lr=_take(t, "base_lr", "training", float, default=0.1),
            momentum=_take(t, "momentum", "training", float, default=0.9),
            lr_milestones=_take_int_list(t, "milestones", "training",
                                         default=(80, 110)),
            lr_decay_factor=_take(t, "decay_factor", "training", float,
                                  default=10.0),
            total_epochs=_take(t, "epochs", "training", int, default=120),
            batch_size=_take(t, "batch_size", "training", int, default=128),
            repetitions=_take(t, "repetitions", "training", int, default=5),
            seed=_take(t, "seed", "training", int, default=0),
            channels=model.channels,
            train_per_class=dataset.train_per_class,
            test_per_class=dataset.test_per_class,
        )
    except ValueError as exc:
        raise ConfigError(f"training: {exc}") from exc
    _reject_unknown(t, "training")

    o = _require_mapping(top.pop("output", None), "output")
    output = OutputSection(
        directory=_take(o, "directory", "output", str, default="out"),
        csv=_take(o, "csv", "output", str, default="metrics.csv"),
    )
    _reject_unknown(o, "output")

    _reject_unknown(top, "config")
    return ExperimentConfig(dataset=dataset, model=model, training=training,
                            precision=precision, output=output)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: invalid YAML{where}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc)
