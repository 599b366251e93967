"""Run configuration: YAML or JSON with model, dataset, train and quant sections.

Every field is optional; omitted ones fall back to the defaults below
(SGD lr 1e-3, momentum 0.9, weight decay 1e-4, 4-bit weights and activations).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .datasets import encode_levels, load_tensor_dir, make_toy_dataset
from .errors import ConfigError
from .gaussmath import RoundingPolicy
from .model import ModelGraph, build_resnet_small, build_small_conv, build_vgg_like
from .quantize import QuantConfig
from .train import TrainConfig

ARCHS = ("small_conv", "resnet_small", "vgg_like")
SOURCES = ("builtin-toy", "directory-of-tensors")


@dataclass
class ModelSection:
    arch: str = "small_conv"
    widths: list | None = None
    stages: list | None = None
    fc_width: int = 1024
    seed: int | None = None


@dataclass
class DatasetSpec:
    source: str = "builtin-toy"
    path: str | None = None
    classes: int = 10
    input_shape: list | None = None
    seed: int = 0
    n_train: int = 5000
    n_test: int = 1000


@dataclass
class TrainSection:
    lr: float = 1e-3
    lr_stage_decay: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs_per_stage: int = 2
    float_epochs: int = 0
    batch_size: int = 64
    ste_scaling: str = "level-scaled"
    act_ste_gate: bool = False
    float_weights: str = "cdf"
    stats_momentum: float = 0.1
    seed: int = 0
    max_stage: int | None = None


@dataclass
class QuantSection:
    b_a: int = 4
    b_w: int = 4
    rounding: str = "nearest"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainSection = field(default_factory=TrainSection)
    quant: QuantSection = field(default_factory=QuantSection)

    def quant_config(self) -> QuantConfig:
        try:
            return QuantConfig(self.quant.b_a, self.quant.b_w, RoundingPolicy(self.quant.rounding))
        except ValueError as exc:
            raise ConfigError(f"quant: {exc}") from exc

    def train_config(self) -> TrainConfig:
        t = self.train
        try:
            return TrainConfig(lr=t.lr, lr_stage_decay=t.lr_stage_decay, momentum=t.momentum,
                               weight_decay=t.weight_decay, epochs_per_stage=t.epochs_per_stage,
                               float_epochs=t.float_epochs, batch_size=t.batch_size,
                               quant=self.quant_config(), ste_scaling=t.ste_scaling, act_ste_gate=t.act_ste_gate,
                               float_weights=t.float_weights, stats_momentum=t.stats_momentum,
                               seed=t.seed, max_stage=t.max_stage)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc


def _coerce(value, default, key: str):
    """YAML reads ``1e-3`` as a string; cast to the type of the field default."""
    if value is None:
        return None
    kind = type(default) if default is not None else None
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            return {"true": True, "false": False}[str(value).lower()]
        if kind is int or key.rsplit(".", 1)[-1] in ("max_stage", "seed"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            return float(value)
    except (TypeError, ValueError, KeyError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__ if kind else 'int'}") from None
    return value


def _section(cls, raw, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown field")
    defaults = cls()
    kw = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in raw.items()}
    return cls(**kw)


def parse_config(doc) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = sorted(set(doc) - {"model", "dataset", "train", "quant"})
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")
    cfg = RunConfig(_section(ModelSection, doc.get("model"), "model"),
                    _section(DatasetSpec, doc.get("dataset"), "dataset"),
                    _section(TrainSection, doc.get("train"), "train"),
                    _section(QuantSection, doc.get("quant"), "quant"))
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: cannot parse {path}: {exc}") from exc
    return parse_config(doc)


def validate(cfg: RunConfig) -> None:
    if cfg.model.arch not in ARCHS:
        raise ConfigError(f"model.arch: must be one of {ARCHS}, got {cfg.model.arch!r}")
    d = cfg.dataset
    if d.source not in SOURCES:
        raise ConfigError(f"dataset.source: must be one of {SOURCES}, got {d.source!r}")
    if d.source == "directory-of-tensors" and not d.path:
        raise ConfigError("dataset.path: required when dataset.source is directory-of-tensors")
    if d.classes < 2:
        raise ConfigError("dataset.classes: need at least 2 classes")
    cfg.quant_config()
    cfg.train_config()


def load_dataset(cfg: RunConfig) -> tuple[np.ndarray, ...]:
    """Returns (x_train, y_train, x_test, y_test) with inputs as integer levels.

    Float inputs are taken to lie in [0, 1] and pass through the input
    quantization node; integer inputs must already be levels.
    """
    d = cfg.dataset
    bits = cfg.quant.b_a
    if d.source == "builtin-toy":
        parts = make_toy_dataset(seed=d.seed, n_train=d.n_train, n_test=d.n_test, classes=d.classes)
    else:
        parts = load_tensor_dir(d.path)
    out = []
    for i, arr in enumerate(parts):
        if i % 2:
            out.append(np.asarray(arr, dtype=np.int64))
            continue
        arr = np.asarray(arr)
        if arr.ndim == 3:
            arr = arr[:, None]
        if arr.dtype.kind == "f":
            arr = encode_levels(arr, bits)
        elif arr.size and (arr.min() < 0 or arr.max() > (1 << bits) - 1):
            raise ConfigError(f"dataset.path: integer inputs must be levels in [0, {(1 << bits) - 1}]")
        out.append(arr.astype(np.int64))
    if len(out[0]) == 0:
        raise ConfigError("dataset: training split is empty")
    return tuple(out)


def build_model(cfg: RunConfig, input_shape=None, num_classes=None) -> ModelGraph:
    m = cfg.model
    q = cfg.quant_config()
    seed = cfg.train.seed if m.seed is None else m.seed
    shape = tuple(input_shape or cfg.dataset.input_shape or
                  ((3, 32, 32) if m.arch == "vgg_like" else (1, 12, 12)))
    classes = num_classes or cfg.dataset.classes
    kw = {"quant": q, "in_shape": shape, "seed": seed}
    if m.widths is not None:
        kw["widths"] = tuple(int(w) for w in m.widths)
    try:
        if m.arch == "small_conv":
            return build_small_conv(classes, **kw)
        if m.arch == "resnet_small":
            if m.stages is not None:
                kw["stages"] = tuple(int(s) for s in m.stages)
            return build_resnet_small(num_classes=classes, **kw)
        return build_vgg_like(classes, fc_width=m.fc_width, **kw)
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"model: {exc}") from exc
