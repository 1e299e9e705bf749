"""Frozen teacher, reprogramming adapter and the shared-classifier forward pass.

Pipeline::

    f_t = adapter(teacher(x))     z_t = classifier(f_t)
    f_s = student(x)              z_s = classifier(f_s)

Only the teacher is frozen; adapter, student and classifier are trained jointly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
from torch import nn

from .errors import ConfigError, InvalidInput
from .zoo import Backbone, count_params


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state_dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def tensor_hash(x: torch.Tensor) -> str:
    return hashlib.sha1(x.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


class FrozenTeacher(nn.Module):
    """Black-box feature extractor with fixed parameters.

    ``head`` is the classifier the teacher was pretrained with; it is only used
    by baselines that need the teacher's own predictions. Teacher features can be
    memoised per input batch (``cache=True``), which is safe because the
    backbone never changes.
    """

    def __init__(self, backbone: Backbone, head: nn.Linear | None = None, name: str = "teacher", cache: bool = False):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.name = name
        self.output_dim = backbone.feature_dim
        self.input_shape = tuple(backbone.input_shape)
        self.cache_enabled = cache
        self._cache: dict[str, torch.Tensor] = {}
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None  # drop leftovers from pretraining
        super().train(False)
        self.checksum = param_checksum(self)

    def train(self, mode: bool = True):
        # Always inference mode: no dropout, no batch-norm statistic updates.
        return super().train(False)

    def _check_input(self, x: torch.Tensor) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise InvalidInput(f"teacher expects inputs of shape (n, {self.input_shape}), got {tuple(x.shape)}")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        if not self.cache_enabled:
            with torch.no_grad():
                return self.backbone(x)
        keys = [tensor_hash(row) for row in x]
        missing = [i for i, k in enumerate(keys) if k not in self._cache]
        if missing:
            with torch.no_grad():
                fresh = self.backbone(x[missing])
            for i, f in zip(missing, fresh):
                self._cache[keys[i]] = f
        return torch.stack([self._cache[k] for k in keys])

    def clear_cache(self) -> None:
        self._cache.clear()

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            raise ConfigError(f"teacher {self.name!r} has no pretrained head")
        with torch.no_grad():
            return self.head(self.features(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)

    def verify(self) -> bool:
        return param_checksum(self) == self.checksum


def teacher_features(t: FrozenTeacher, x: torch.Tensor) -> torch.Tensor:
    return t.features(x)


class ResidualBlock(nn.Module):
    """linear -> LayerNorm -> ReLU -> linear, plus a skip connection.

    The skip is the identity when ``d_in == d_out`` and a bias-free linear
    projection otherwise. The second linear starts at zero, so a fresh block
    computes exactly ``skip(x)``.

    Parameters: ``d_in*d_out + d_out`` (first linear) + ``2*d_out`` (norm) +
    ``d_out*d_out + d_out`` (second linear) + ``d_in*d_out`` if projecting.
    """

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_out)
        self.norm = nn.LayerNorm(d_out)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(d_out, d_out)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)
        self.skip = nn.Identity() if d_in == d_out else nn.Linear(d_in, d_out, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.skip(x) + self.fc2(self.act(self.norm(self.fc1(x))))


class ConvResidualBlock(nn.Module):
    """Convolutional twin of ResidualBlock for image-shaped teacher outputs."""

    def __init__(self, c_in: int, c_out: int, groups: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(groups, c_out)
        self.act = nn.ReLU()
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.skip(x) + self.conv2(self.act(self.norm(self.conv1(x))))


class ReprogramAdapter(nn.Sequential):
    def __init__(self, d_t: int, d_h: int, depth: int = 2, kind: str = "linear"):
        block = {"linear": ResidualBlock, "conv": ConvResidualBlock}.get(kind)
        if block is None:
            raise ConfigError(f"unknown adapter kind {kind!r}")
        super().__init__(*[block(d_t if i == 0 else d_h, d_h) for i in range(depth)])
        self.d_in = d_t
        self.d_out = d_h
        self.depth = depth
        self.kind = kind

    def projection(self, f: torch.Tensor) -> torch.Tensor:
        """The skip-path map of the first block (identity when dims match)."""
        return self[0].skip(f)


def build_adapter(d_t: int, d_h: int, depth: int = 2, kind: str = "linear", seed: int | None = None) -> ReprogramAdapter:
    if d_t < 1 or d_h < 1:
        raise ConfigError(f"adapter dims must be >= 1, got d_t={d_t}, d_h={d_h}")
    if depth < 1:
        raise ConfigError(f"adapter depth must be >= 1, got {depth}")
    if seed is None:
        return ReprogramAdapter(d_t, d_h, depth, kind)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ReprogramAdapter(d_t, d_h, depth, kind)


@dataclass
class RDOutputs:
    z_t: torch.Tensor
    z_s: torch.Tensor
    f_t: torch.Tensor
    f_s: torch.Tensor


def rd_forward(t: FrozenTeacher, phi: nn.Module, s: nn.Module, g: nn.Module, x: torch.Tensor) -> RDOutputs:
    f_t = phi(t.features(x))
    f_s = s(x)
    return RDOutputs(z_t=g(f_t), z_s=g(f_s), f_t=f_t, f_s=f_s)


@dataclass
class RDPipeline:
    """Teacher, adapter, student and the single classifier they share.

    Dimensions are checked on construction so a mismatch fails before training.
    """

    teacher: FrozenTeacher
    adapter: ReprogramAdapter
    student: Backbone
    classifier: nn.Linear
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        problems = []
        if self.adapter.d_in != self.teacher.output_dim:
            problems.append(f"adapter input {self.adapter.d_in} != teacher feature dim {self.teacher.output_dim}")
        if self.adapter.d_out != self.student.feature_dim:
            problems.append(f"adapter output {self.adapter.d_out} != student feature dim {self.student.feature_dim}")
        if self.classifier.in_features != self.student.feature_dim:
            problems.append(
                f"classifier input {self.classifier.in_features} != shared feature dim {self.student.feature_dim}"
            )
        if tuple(self.student.input_shape) != self.teacher.input_shape:
            problems.append(f"student input {self.student.input_shape} != teacher input {self.teacher.input_shape}")
        if problems:
            raise ConfigError("; ".join(problems), problems)

    def forward(self, x: torch.Tensor) -> RDOutputs:
        return rd_forward(self.teacher, self.adapter, self.student, self.classifier, x)

    __call__ = forward

    def trainable_modules(self) -> list[nn.Module]:
        return [self.adapter, self.student, self.classifier]

    def trainable_parameters(self) -> list[nn.Parameter]:
        seen, out = set(), []
        for m in self.trainable_modules():
            for p in m.parameters():
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def num_trainable(self) -> int:
        return count_params(self.trainable_modules()).trainable

    def train(self, mode: bool = True) -> "RDPipeline":
        for m in self.trainable_modules():
            m.train(mode)
        return self

    def eval(self) -> "RDPipeline":
        return self.train(False)

    def teacher_path(self) -> nn.Module:
        return TeacherPath(self.teacher, self.adapter, self.classifier)

    def student_path(self) -> nn.Module:
        return nn.Sequential(self.student, self.classifier)


class TeacherPath(nn.Module):
    """x -> classifier(adapter(teacher(x))) as a single module."""

    def __init__(self, teacher: FrozenTeacher, adapter: nn.Module, classifier: nn.Module):
        super().__init__()
        self.teacher = teacher
        self.adapter = adapter
        self.classifier = classifier

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.adapter(self.teacher(x)))


def save_checkpoint(path: str | Path, modules: dict[str, nn.Module], config: dict, teacher: FrozenTeacher | None, **extra) -> Path:
    """Write one archive with the trainable state and the config snapshot.

    The teacher itself is never stored, only its name and parameter checksum.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state": {k: m.state_dict() for k, m in modules.items()},
        "config": config,
        "teacher": None if teacher is None else {"name": teacher.name, "checksum": teacher.checksum},
        **extra,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    return torch.load(Path(path), map_location="cpu", weights_only=False)


__all__ = [
    "ConvResidualBlock",
    "FrozenTeacher",
    "RDOutputs",
    "RDPipeline",
    "ReprogramAdapter",
    "ResidualBlock",
    "TeacherPath",
    "build_adapter",
    "load_checkpoint",
    "param_checksum",
    "rd_forward",
    "save_checkpoint",
    "teacher_features",
]
