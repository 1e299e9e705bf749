"""Desk-scale teacher/student backbones and the cost tooling (params, FLOPs, latency).

FLOP convention: one multiply-accumulate counts as one FLOP. Linear layers cost
``d_in * d_out`` per row, convolutions ``k_h * k_w * c_in/groups * c_out * h_out * w_out``
per sample. Normalisation, activation and pooling layers are not counted.
"""

from __future__ import annotations

import logging
import math
import platform
import statistics
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Iterable

import torch
from torch import nn

from .errors import ConfigError

log = logging.getLogger(__name__)

FAMILIES = ("toy_cnn_large", "toy_cnn_small", "mlp_small", "mlp_tiny", "linear_probe_teacher")
TEACHER_FAMILIES = ("toy_cnn_large", "linear_probe_teacher")
STUDENT_FAMILIES = ("toy_cnn_small", "mlp_small", "mlp_tiny")

FLOP_CONVENTION = "flops = multiply-accumulates per forward pass (linear, conv); norms/activations/pooling excluded"

_NORMS = (nn.BatchNorm1d, nn.BatchNorm2d, nn.LayerNorm, nn.GroupNorm)


@dataclass(frozen=True)
class ModelSpec:
    family: str
    input_shape: tuple[int, ...]
    feature_dim: int
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))


class Backbone(nn.Module):
    """Feature extractor: maps a batch of inputs to (n, feature_dim) features."""

    def __init__(self, body: nn.Module, spec: ModelSpec, trainable: bool = True):
        super().__init__()
        self.body = body
        self.family = spec.family
        self.input_shape = spec.input_shape
        self.feature_dim = spec.feature_dim
        self.trainable = trainable
        if not trainable:
            for p in self.body.parameters():
                p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def _flat_dim(shape: tuple[int, ...]) -> int:
    return int(math.prod(shape))


def _image_shape(spec: ModelSpec) -> tuple[int, int, int]:
    if len(spec.input_shape) != 3:
        raise ConfigError(f"{spec.family} needs an image input (C, H, W), got {spec.input_shape}")
    return spec.input_shape  # type: ignore[return-value]


def _toy_cnn_large(spec: ModelSpec) -> nn.Module:
    c, _, _ = _image_shape(spec)
    return nn.Sequential(
        nn.Conv2d(c, 32, 3, padding=1),
        nn.BatchNorm2d(32),
        nn.ReLU(),
        nn.Conv2d(32, 64, 3, padding=1),
        nn.BatchNorm2d(64),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(64, 128, 3, padding=1),
        nn.BatchNorm2d(128),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(128, spec.feature_dim),
    )


def _toy_cnn_small(spec: ModelSpec) -> nn.Module:
    c, _, _ = _image_shape(spec)
    return nn.Sequential(
        nn.Conv2d(c, 8, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(8, 16, 3, padding=1),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(16, spec.feature_dim),
    )


def _mlp_small(spec: ModelSpec) -> nn.Module:
    return nn.Sequential(
        nn.Flatten(),
        nn.Linear(_flat_dim(spec.input_shape), 128),
        nn.ReLU(),
        nn.Linear(128, spec.feature_dim),
    )


def _mlp_tiny(spec: ModelSpec) -> nn.Module:
    return nn.Sequential(
        nn.Flatten(),
        nn.Linear(_flat_dim(spec.input_shape), spec.feature_dim),
        nn.ReLU(),
        nn.Linear(spec.feature_dim, spec.feature_dim),
    )


def _linear_probe_teacher(spec: ModelSpec) -> nn.Module:
    return nn.Sequential(nn.Flatten(), nn.Linear(_flat_dim(spec.input_shape), spec.feature_dim, bias=False))


_BUILDERS = {
    "toy_cnn_large": _toy_cnn_large,
    "toy_cnn_small": _toy_cnn_small,
    "mlp_small": _mlp_small,
    "mlp_tiny": _mlp_tiny,
    "linear_probe_teacher": _linear_probe_teacher,
}


@contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def build_model(spec: ModelSpec, seed: int = 0) -> Backbone:
    """Build the backbone for ``spec``; identical (spec, seed) give identical weights.

    The classifier head is not part of the backbone.
    """
    try:
        builder = _BUILDERS[spec.family]
    except KeyError:
        raise ConfigError(f"unknown model family {spec.family!r}; expected one of {FAMILIES}") from None
    if spec.feature_dim < 1:
        raise ConfigError(f"feature_dim must be >= 1, got {spec.feature_dim}")
    with seeded(seed):
        body = builder(spec)
    return Backbone(body, spec, trainable=spec.family != "linear_probe_teacher")


def build_classifier(feature_dim: int, num_classes: int, seed: int = 0) -> nn.Linear:
    with seeded(seed):
        return nn.Linear(feature_dim, num_classes)


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    frozen: int

    @property
    def total(self) -> int:
        return self.trainable + self.frozen


def count_params(model: nn.Module | Iterable[nn.Module]) -> ParamCount:
    """Exact parameter counts, split by ``requires_grad``. Shared tensors count once."""
    modules = [model] if isinstance(model, nn.Module) else list(model)
    seen: set[int] = set()
    trainable = frozen = 0
    for m in modules:
        for p in m.parameters():
            if id(p) in seen:
                continue
            seen.add(id(p))
            if p.requires_grad:
                trainable += p.numel()
            else:
                frozen += p.numel()
    return ParamCount(trainable, frozen)


def _leaf_macs(module: nn.Module, inp: torch.Tensor, out: torch.Tensor) -> int | None:
    if isinstance(module, nn.Linear):
        return inp.numel() // module.in_features * module.in_features * module.out_features
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        return out.numel() * (module.in_channels // module.groups) * kh * kw
    return None


def count_flops(model: nn.Module, input_shape: tuple[int, ...], batch: int = 1) -> int:
    """Multiply-accumulate count for one forward pass of a ``batch``-sized input."""
    total = 0
    uncounted: set[str] = set()

    def hook(module, inputs, output):
        nonlocal total
        macs = _leaf_macs(module, inputs[0], output)
        if macs is not None:
            total += macs
        elif not isinstance(module, _NORMS) and any(True for _ in module.parameters(recurse=False)):
            uncounted.add(type(module).__name__)

    handles = [m.register_forward_hook(hook) for m in model.modules() if not list(m.children())]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros((batch, *input_shape)))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    if uncounted:
        warnings.warn(f"FLOPs not counted for layer kinds: {sorted(uncounted)}", stacklevel=2)
    return total


@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    std_ms: float
    runs: int

    @property
    def cv(self) -> float:
        return self.std_ms / self.mean_ms if self.mean_ms > 0 else 0.0


@contextmanager
def single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def measure_latency(
    model: nn.Module, input_shape: tuple[int, ...], batch: int = 32, runs: int = 30, warmup: int = 5
) -> LatencyStats:
    """Mean and std of wall-clock milliseconds per minibatch, single-threaded CPU.

    Must run with the machine otherwise idle; concurrent load skews the numbers.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    x = torch.randn((batch, *input_shape), generator=torch.Generator().manual_seed(0))
    was_training = model.training
    model.eval()
    times = []
    try:
        with single_thread(), torch.inference_mode():
            for _ in range(warmup):
                model(x)
            for _ in range(runs):
                t0 = time.perf_counter()
                model(x)
                times.append((time.perf_counter() - t0) * 1e3)
    finally:
        model.train(was_training)
    std = statistics.stdev(times) if len(times) > 1 else 0.0
    return LatencyStats(statistics.fmean(times), std, runs)


def hardware_string() -> str:
    cpu = platform.processor() or platform.machine()
    return f"{platform.system()} {cpu} cpu threads=1 torch={torch.__version__}"


@dataclass
class CostReport:
    name: str
    params_trainable: int
    params_frozen: int
    flops: int
    latency_ms: float
    latency_std: float
    hardware: str = field(default_factory=hardware_string)

    FIELDS = ("name", "params_trainable", "params_frozen", "flops", "latency_ms", "latency_std", "hardware")

    def row(self) -> dict:
        return asdict(self)


def cost_report(
    name: str, model: nn.Module, input_shape: tuple[int, ...], batch: int = 32, runs: int = 30
) -> CostReport:
    params = count_params(model)
    flops = count_flops(model, input_shape, batch=batch)
    lat = measure_latency(model, input_shape, batch=batch, runs=runs)
    return CostReport(name, params.trainable, params.frozen, flops, round(lat.mean_ms, 4), round(lat.std_ms, 4))


def check_pair(teacher: ModelSpec, student: ModelSpec, seed: int = 0, ratio: float = 0.5) -> None:
    """Raise ConfigError unless the student has fewer than ``ratio`` times the teacher's parameters."""
    t = count_params(build_model(teacher, seed)).total
    s = count_params(build_model(student, seed)).total
    if not s < ratio * t:
        raise ConfigError(f"student {student.family} has {s} params, not < {ratio} x teacher {teacher.family} ({t})")


__all__ = [
    "FAMILIES",
    "FLOP_CONVENTION",
    "Backbone",
    "CostReport",
    "LatencyStats",
    "ModelSpec",
    "ParamCount",
    "build_classifier",
    "build_model",
    "check_pair",
    "cost_report",
    "count_flops",
    "count_params",
    "hardware_string",
    "measure_latency",
    "seeded",
]
