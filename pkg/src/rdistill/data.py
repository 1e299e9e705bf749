"""Datasets, deterministic 4:1 splitting, minibatching and the synthetic domain-shift generator."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from scipy.linalg import expm

from .errors import ConfigError, InvalidInput, SplitError

log = logging.getLogger(__name__)

SHIFTS = ("identity", "label_remap", "channel_transform", "class_subset")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}


@dataclass(frozen=True)
class Dataset:
    """Immutable labelled sample collection. ``inputs`` is (N, *shape), ``labels`` is (N,) int64."""

    inputs: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    name: str = "dataset"
    provenance: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise InvalidInput(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.num_classes < 2:
            raise InvalidInput(f"need at least 2 classes, got {self.num_classes}")
        if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise InvalidInput(f"labels must lie in [0, {self.num_classes})")
        if self.provenance not in ("synthetic", "file"):
            raise InvalidInput(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> tuple[torch.Tensor, int]:
        return self.inputs[i], int(self.labels[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def class_counts(self) -> list[int]:
        return torch.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx], name=name or self.name)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    stratified: bool = True
    seed: int = 0


def _n_train(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 0.5))


def split_indices(labels: torch.Tensor, num_classes: int, s: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(s.seed)
    y = labels.numpy()
    if not s.stratified:
        perm = rng.permutation(len(y))
        k = _n_train(len(y), s.train_fraction)
        return np.sort(perm[:k]), np.sort(perm[k:])
    train, test = [], []
    for c in range(num_classes):
        idx = np.flatnonzero(y == c)
        if len(idx) == 0:
            continue
        if len(idx) == 1:
            raise SplitError(f"class {c} has a single sample; cannot stratify")
        idx = rng.permutation(idx)
        k = min(max(_n_train(len(idx), s.train_fraction), 1), len(idx) - 1)
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split(d: Dataset, s: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Deterministic train/test partition (4:1 by default), stratified by class."""
    tr, te = split_indices(d.labels, d.num_classes, s)
    return d.subset(tr, f"{d.name}/train"), d.subset(te, f"{d.name}/test")


def batches(
    d: Dataset, batch_size: int = 32, seed: int = 0, shuffle: bool = True, flip: bool = False
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield (inputs, labels) minibatches; a trailing batch with fewer than 2 samples is dropped."""
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 (CKA needs two samples), got {batch_size}")
    n = len(d)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    flip_rng = np.random.default_rng((seed, 1))
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            log.debug("dropping trailing batch of size %d from %s", len(idx), d.name)
            break
        idx_t = torch.as_tensor(idx)
        x = d.inputs[idx_t]
        if flip and x.dim() == 4:
            mask = torch.as_tensor(flip_rng.random(len(idx)) < 0.5)
            x = torch.where(mask[:, None, None, None], x.flip(-1), x)
        yield x, d.labels[idx_t]


# --------------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "channel_transform"
    strength: float = 0.6

    def __post_init__(self):
        if self.kind not in SHIFTS:
            raise ConfigError(f"unknown shift {self.kind!r}; expected one of {SHIFTS}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for the shifted pretrain/downstream pair.

    Images are sums of small coloured motifs dropped at random positions. Each
    class draws its motifs from its own Dirichlet-sampled preference over a
    shared motif dictionary, so classes overlap to a degree set by
    ``class_concentration`` (smaller means more distinct classes).
    """

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


@dataclass(frozen=True)
class _World:
    motifs: np.ndarray  # (num_motifs, channels, motif_size, motif_size)
    preferences: np.ndarray  # (num_classes, num_motifs)
    mixing: np.ndarray  # (channels, channels)
    permutation: np.ndarray


def _world(base_seed: int, synth: SyntheticSpec, shift: ShiftSpec) -> _World:
    if synth.motif_size > synth.image_size:
        raise ConfigError(f"motif_size {synth.motif_size} exceeds image_size {synth.image_size}")
    rng = np.random.default_rng([base_seed, 7919])
    c, k = synth.channels, synth.num_motifs
    motifs = rng.standard_normal((k, c, synth.motif_size, synth.motif_size))
    motifs /= np.sqrt((motifs**2).mean(axis=(1, 2, 3), keepdims=True))
    prefs = rng.dirichlet(np.full(k, synth.class_concentration), size=synth.num_classes)
    mixing = _rotation_mixing(rng, c, shift.strength)
    permutation = np.roll(np.arange(synth.num_classes), 1)
    return _World(motifs, prefs, mixing, permutation)


def _rotation_mixing(rng: np.random.Generator, c: int, strength: float, gain: float = 1.5) -> np.ndarray:
    """``gain * expm(A)`` for a random skew-symmetric ``A``; rotation angle ``strength * pi/2``."""
    a = rng.standard_normal((c, c))
    a = a - a.T
    norm = np.linalg.norm(a, 2)
    if norm == 0:  # single channel: pure contrast change
        return np.full((c, c), gain)
    return gain * expm(a / norm * strength * np.pi / 2)


def _sample(world: _World, synth: SyntheticSpec, n: int, rng: np.random.Generator, classes: np.ndarray):
    y = classes[np.arange(n) % len(classes)]
    rng.shuffle(y)
    s, ms = synth.image_size, synth.motif_size
    canvas = np.zeros((n, synth.channels, s, s))
    for i in range(n):
        for k in rng.choice(synth.num_motifs, size=synth.motifs_per_image, p=world.preferences[y[i]]):
            r, q = rng.integers(0, s - ms + 1, size=2)
            canvas[i, :, r : r + ms, q : q + ms] += world.motifs[k]
    x = np.tanh(synth.gain * canvas) + synth.pixel_noise * rng.standard_normal(canvas.shape)
    return np.clip(x, -1.0, 1.0), y


def channel_transform(x: np.ndarray, mixing: np.ndarray) -> np.ndarray:
    """Per-pixel channel mixing followed by tanh: ``x' = tanh(M x)`` on the channel axis."""
    return np.tanh(np.einsum("ij,njhw->nihw", mixing, x))


def invert_channel_transform(x: np.ndarray, mixing: np.ndarray) -> np.ndarray:
    y = np.arctanh(np.clip(x, -1 + 1e-15, 1 - 1e-15))
    return np.einsum("ij,njhw->nihw", np.linalg.inv(mixing), y)


def _dataset(x: np.ndarray, y: np.ndarray, num_classes: int, name: str, meta: dict) -> Dataset:
    return Dataset(
        inputs=torch.as_tensor(x, dtype=torch.float32),
        labels=torch.as_tensor(y, dtype=torch.int64),
        num_classes=num_classes,
        name=name,
        provenance="synthetic",
        meta=meta,
    )


def make_shifted_pair(
    base_seed: int, shift: ShiftSpec = ShiftSpec(), synth: SyntheticSpec = SyntheticSpec()
) -> tuple[Dataset, Dataset]:
    """Draw a pretraining set and a downstream set from related generative processes.

    Both share the same class structure and rendering basis. The downstream set
    is then shifted: ``identity`` (no change), ``channel_transform`` (per-pixel
    invertible channel mixing plus tanh, a modality change), ``label_remap``
    (fixed cyclic permutation of class ids, a task change) or ``class_subset``
    (only the first half of the classes, relabelled from 0).
    """
    world = _world(base_seed, synth, shift)
    meta = {
        "generator": "shifted_pair",
        "seed": base_seed,
        "shift": shift.kind,
        "strength": shift.strength,
        "value_range": (-1.0, 1.0),
    }
    all_classes = np.arange(synth.num_classes)
    x_pre, y_pre = _sample(world, synth, synth.n_pretrain, np.random.default_rng([base_seed, 1]), all_classes)
    pretrain = _dataset(x_pre, y_pre, synth.num_classes, "pretrain", {**meta, "size": synth.n_pretrain})

    rng_down = np.random.default_rng([base_seed, 2])
    num_down = synth.num_classes
    if shift.kind == "class_subset":
        keep = np.arange(max(2, synth.num_classes // 2))
        x, y = _sample(world, synth, synth.n_downstream, rng_down, keep)
        num_down = len(keep)
    else:
        x, y = _sample(world, synth, synth.n_downstream, rng_down, all_classes)
    if shift.kind == "channel_transform":
        x = channel_transform(x, world.mixing)
    elif shift.kind == "label_remap":
        y = world.permutation[y]
    downstream = _dataset(x, y, num_down, "downstream", {**meta, "size": synth.n_downstream})
    return pretrain, downstream


def mixing_matrix(base_seed: int, synth: SyntheticSpec = SyntheticSpec(), shift: ShiftSpec = ShiftSpec()) -> np.ndarray:
    return _world(base_seed, synth, shift).mixing


def separable_direction(seed: int, dim: int = 2) -> tuple[np.ndarray, float]:
    """Unit normal ``w`` and offset ``b`` of the true boundary ``w.x + b = 0`` used by make_separable."""
    rng = np.random.default_rng([seed, 31])
    w = rng.standard_normal(dim)
    w /= np.linalg.norm(w)
    return w, float(rng.uniform(-0.2, 0.2))


def make_separable(
    n: int, seed: int = 0, dim: int = 2, margin: float = 0.1, name: str = "separable", draw: int = 0
) -> Dataset:
    """Two linearly separable classes, uniform in [-1, 1]^dim, with no points within ``margin`` of the boundary.

    ``seed`` fixes the boundary, ``draw`` selects an independent sample from it.
    """
    w, b = separable_direction(seed, dim)
    rng = np.random.default_rng([seed, 32, draw])
    xs: list[np.ndarray] = []
    while sum(len(x) for x in xs) < n:
        x = rng.uniform(-1.0, 1.0, size=(2 * n, dim))
        xs.append(x[np.abs(x @ w + b) > margin])
    x = np.concatenate(xs)[:n]
    y = (x @ w + b > 0).astype(np.int64)
    meta = {"generator": "separable", "seed": seed, "value_range": (-1.0, 1.0), "normal": w.tolist(), "offset": b}
    return _dataset(x, y, 2, name, meta)


# --------------------------------------------------------------------------- files


def _load_image(path: Path, image_size: int, channels: int) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L").resize((image_size, image_size))
            a = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    except OSError as exc:
        raise InvalidInput(f"cannot read image {path}: {exc}") from None
    return a[None] if a.ndim == 2 else a.transpose(2, 0, 1)


def load_image_folder(root: str | Path, image_size: int = 8, channels: int = 3, name: str | None = None) -> Dataset:
    """One sub-directory per class; class ids follow sorted directory names."""
    root = Path(root)
    if not root.is_dir():
        raise InvalidInput(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise InvalidInput(f"{root} needs at least two class sub-directories")
    xs, ys = [], []
    for label, cdir in enumerate(class_dirs):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                xs.append(_load_image(f, image_size, channels))
                ys.append(label)
    meta = {"root": str(root), "classes": [p.name for p in class_dirs], "value_range": (-1.0, 1.0)}
    return Dataset(
        torch.as_tensor(np.stack(xs)), torch.as_tensor(ys, dtype=torch.int64), len(class_dirs),
        name or root.name, "file", meta,
    )


def load_manifest(csv_path: str | Path, image_size: int = 8, channels: int = 3, name: str | None = None) -> Dataset:
    """CSV with header ``path,label``; relative paths resolve against the CSV's directory."""
    csv_path = Path(csv_path)
    with csv_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != ["path", "label"]:
            raise InvalidInput(f"{csv_path}: header must be exactly 'path,label'")
        rows = [(r["path"].strip(), r["label"].strip()) for r in reader]
    xs, ys = [], []
    for i, (p, lab) in enumerate(rows, start=2):
        try:
            ys.append(int(lab))
        except ValueError:
            raise InvalidInput(f"{csv_path}:{i}: label {lab!r} is not an integer") from None
        path = Path(p)
        xs.append(_load_image(path if path.is_absolute() else csv_path.parent / path, image_size, channels))
    num_classes = max(ys) + 1
    meta = {"manifest": str(csv_path), "value_range": (-1.0, 1.0)}
    return Dataset(
        torch.as_tensor(np.stack(xs)), torch.as_tensor(ys, dtype=torch.int64), max(num_classes, 2),
        name or csv_path.stem, "file", meta,
    )


__all__ = [
    "SHIFTS",
    "Dataset",
    "ShiftSpec",
    "SplitSpec",
    "SyntheticSpec",
    "batches",
    "channel_transform",
    "invert_channel_transform",
    "load_image_folder",
    "load_manifest",
    "make_separable",
    "make_shifted_pair",
    "mixing_matrix",
    "separable_direction",
    "split",
    "split_indices",
]
