"""Declarative run configuration: schema, defaults, validation and YAML round-tripping.

Unknown keys are errors. Validation collects every violation before raising, and
each message names the offending key by its dotted path (``optimizer.lr``).
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SHIFTS, ShiftSpec, SplitSpec, SyntheticSpec
from .errors import ConfigError
from .zoo import FAMILIES, ModelSpec

METHODS = ("rd_full", "rd_no_cka", "direct_reprog", "kd_only", "student_only")
DATA_SOURCES = ("synthetic", "separable", "folder", "manifest")
OPTIMIZERS = ("adamw", "adam", "sgd")


@dataclass
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 5e-3
    weight_decay: float = 1e-4


@dataclass
class TeacherConfig:
    family: str = "toy_cnn_large"
    feature_dim: int = 64
    name: str = "toy-teacher"
    pretrain_epochs: int = 15
    pretrain_lr: float = 2e-3
    pretrain_batch_size: int = 64


@dataclass
class StudentConfig:
    family: str = "mlp_small"
    # None means "same as adapter.d_h"
    feature_dim: typing.Optional[int] = None


@dataclass
class AdapterConfig:
    d_h: int = 64
    depth: int = 2


@dataclass
class DataConfig:
    source: str = "synthetic"
    # None means "same as the run seed"
    seed: typing.Optional[int] = None
    shift: str = "channel_transform"
    shift_strength: float = 0.6
    num_classes: int = 4
    channels: int = 3
    image_size: int = 8
    n_pretrain: int = 6000
    n_downstream: int = 400
    num_motifs: int = 8
    motif_size: int = 3
    motifs_per_image: int = 4
    class_concentration: float = 0.3
    gain: float = 0.8
    pixel_noise: float = 0.3
    # input dimension for the separable toy source
    dim: int = 2
    path: typing.Optional[str] = None
    pretrain_path: typing.Optional[str] = None
    train_fraction: float = 0.8
    stratified: bool = True
    flip: bool = False


@dataclass
class ExperimentConfig:
    method: str = "student_only"
    seed: int = 0
    epochs: int = 240
    batch_size: int = 32
    temperature: float = 1.0
    initial_weight: float = 1.0
    final_weight: float = 0.0
    deterministic: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    data: DataConfig = field(default_factory=DataConfig)

    # ---- derived views
    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    @property
    def shared_dim(self) -> int:
        return self.adapter.d_h

    def input_shape(self) -> tuple[int, int, int]:
        return (self.data.channels, self.data.image_size, self.data.image_size)

    def teacher_spec(self, num_classes: int, input_shape: tuple[int, ...] | None = None) -> ModelSpec:
        return ModelSpec(self.teacher.family, input_shape or self.input_shape(), self.teacher.feature_dim, num_classes)

    def student_spec(self, num_classes: int, input_shape: tuple[int, ...] | None = None) -> ModelSpec:
        return ModelSpec(self.student.family, input_shape or self.input_shape(), self.shared_dim, num_classes)

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(
            num_classes=d.num_classes, channels=d.channels, image_size=d.image_size,
            n_pretrain=d.n_pretrain, n_downstream=d.n_downstream, num_motifs=d.num_motifs,
            motif_size=d.motif_size, motifs_per_image=d.motifs_per_image,
            class_concentration=d.class_concentration, gain=d.gain, pixel_noise=d.pixel_noise,
        )

    def shift_spec(self) -> ShiftSpec:
        return ShiftSpec(self.data.shift, self.data.shift_strength)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.data.train_fraction, self.data.stratified, self.data_seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with top-level or dotted-path overrides, e.g. ``replace(**{"data.shift": "identity"})``."""
        raw = self.to_dict()
        for key, value in changes.items():
            node = raw
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return from_dict(raw)


# ---------------------------------------------------------------- validation


def _check(errors: list[str], ok: bool, key: str, msg: str) -> None:
    if not ok:
        errors.append(f"{key}: {msg}")


def _coerce(value, tp, key: str, errors: list[str]):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], key, errors)
    if tp is bool:
        if isinstance(value, bool):
            return value
        errors.append(f"{key}: expected true/false, got {value!r}")
        return None
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        errors.append(f"{key}: expected an integer, got {value!r}")
        return None
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        errors.append(f"{key}: expected a number, got {value!r}")
        return None
    if tp is str:
        if isinstance(value, str):
            return value
        errors.append(f"{key}: expected a string, got {value!r}")
        return None
    return value


def _build(cls, raw, prefix: str, errors: list[str]):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{prefix or '<root>'}: expected a mapping, got {type(raw).__name__}")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in raw:
        if k not in names:
            errors.append(f"{prefix}{k}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        key = prefix + f.name
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, raw[f.name], key + ".", errors)
        else:
            if raw[f.name] is None and typing.get_origin(tp) not in (typing.Union, types.UnionType):
                errors.append(f"{key}: may not be null")
                continue
            v = _coerce(raw[f.name], tp, key, errors)
            if v is not None or raw[f.name] is None:
                kwargs[f.name] = v
    return cls(**kwargs)


def _validate(c: ExperimentConfig) -> list[str]:
    e: list[str] = []
    _check(e, c.method in METHODS, "method", f"must be one of {METHODS}, got {c.method!r}")
    _check(e, c.epochs >= 1, "epochs", "must be >= 1")
    _check(e, c.batch_size >= 2, "batch_size", "must be >= 2")
    _check(e, c.temperature > 0, "temperature", "must be > 0")
    _check(e, c.initial_weight >= 0, "initial_weight", "must be >= 0")
    _check(e, c.final_weight >= 0, "final_weight", "must be >= 0")
    o = c.optimizer
    _check(e, o.name in OPTIMIZERS, "optimizer.name", f"must be one of {OPTIMIZERS}")
    _check(e, o.lr > 0, "optimizer.lr", f"must be > 0, got {o.lr}")
    _check(e, o.weight_decay >= 0, "optimizer.weight_decay", "must be >= 0")
    t = c.teacher
    _check(e, t.family in FAMILIES, "teacher.family", f"must be one of {FAMILIES}")
    _check(e, t.feature_dim >= 1, "teacher.feature_dim", "must be >= 1")
    _check(e, t.pretrain_epochs >= 0, "teacher.pretrain_epochs", "must be >= 0")
    _check(e, t.pretrain_lr > 0, "teacher.pretrain_lr", "must be > 0")
    _check(e, t.pretrain_batch_size >= 2, "teacher.pretrain_batch_size", "must be >= 2")
    s = c.student
    _check(e, s.family in FAMILIES, "student.family", f"must be one of {FAMILIES}")
    _check(
        e, s.feature_dim is None or s.feature_dim == c.adapter.d_h, "student.feature_dim",
        f"must equal adapter.d_h ({c.adapter.d_h}) because the classifier is shared",
    )
    _check(e, c.adapter.d_h >= 1, "adapter.d_h", "must be >= 1")
    _check(e, c.adapter.depth >= 1, "adapter.depth", "must be >= 1")
    d = c.data
    _check(e, d.source in DATA_SOURCES, "data.source", f"must be one of {DATA_SOURCES}")
    _check(e, d.shift in SHIFTS, "data.shift", f"must be one of {SHIFTS}")
    _check(e, d.shift_strength > 0, "data.shift_strength", "must be > 0")
    _check(e, d.num_classes >= 2, "data.num_classes", "must be >= 2")
    _check(e, d.channels in (1, 3), "data.channels", "must be 1 or 3")
    _check(e, d.image_size >= 2, "data.image_size", "must be >= 2")
    _check(e, d.n_pretrain >= 2 * d.num_classes, "data.n_pretrain", "too small for the class count")
    _check(e, d.n_downstream >= 2 * d.num_classes, "data.n_downstream", "too small for the class count")
    _check(e, d.num_motifs >= 1, "data.num_motifs", "must be >= 1")
    _check(e, 1 <= d.motif_size <= d.image_size, "data.motif_size", "must lie in [1, data.image_size]")
    _check(e, d.motifs_per_image >= 1, "data.motifs_per_image", "must be >= 1")
    _check(e, d.class_concentration > 0, "data.class_concentration", "must be > 0")
    _check(e, d.gain > 0, "data.gain", "must be > 0")
    _check(e, d.pixel_noise >= 0, "data.pixel_noise", "must be >= 0")
    _check(e, d.dim >= 1, "data.dim", "must be >= 1")
    _check(e, 0 < d.train_fraction < 1, "data.train_fraction", "must lie in (0, 1)")
    if d.source in ("folder", "manifest"):
        _check(e, bool(d.path), "data.path", f"required when data.source is {d.source!r}")
        if c.method != "student_only":
            _check(e, bool(d.pretrain_path), "data.pretrain_path", "required to pretrain the teacher on file data")
    return e


def from_dict(raw: dict | None) -> ExperimentConfig:
    errors: list[str] = []
    cfg = _build(ExperimentConfig, raw or {}, "", errors)
    errors += _validate(cfg)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors), errors)
    return cfg


def loads(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return from_dict(raw)


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text())


__all__ = [
    "DATA_SOURCES",
    "METHODS",
    "AdapterConfig",
    "DataConfig",
    "ExperimentConfig",
    "OptimizerConfig",
    "StudentConfig",
    "TeacherConfig",
    "from_dict",
    "load",
    "loads",
]
