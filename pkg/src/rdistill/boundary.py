"""Decision-boundary comparison on a plane spanned by three input samples.

For anchors ``a0, a1, a2`` every grid point is ``a0 + u (a1 - a0) + v (a2 - a0)``
with ``u, v`` in ``[-margin, 1 + margin]``. Each point is classified and the
argmax labels form an r x r matrix; two models are compared by the fraction
of cells on which their labels agree.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Dataset
from .errors import DegeneratePlane, InvalidInput, ShapeMismatch
from .trainer import predict

PALETTE = ["#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3", "#937860", "#DA8BC3", "#8C8C8C", "#CCB974", "#64B5CD"]


@dataclass(frozen=True)
class BoundaryPlotSpec:
    anchors: tuple[int, int, int] | None = None
    resolution: int = 200
    margin: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.resolution < 2:
            raise InvalidInput("resolution must be >= 2")
        if self.margin < 0:
            raise InvalidInput("margin must be >= 0")
        if self.anchors is not None and len(self.anchors) != 3:
            raise InvalidInput("exactly three anchors are required")


def choose_anchors(d: Dataset, seed: int = 0) -> tuple[int, int, int]:
    """Indices of three samples, one per distinct class where the dataset allows it."""
    order = np.random.default_rng(seed).permutation(len(d))
    picked: list[int] = []
    classes: set[int] = set()
    for i in order:
        y = int(d.labels[i])
        if y not in classes:
            classes.add(y)
            picked.append(int(i))
        if len(picked) == 3:
            return tuple(picked)  # type: ignore[return-value]
    for i in order:
        if len(picked) == 3:
            break
        if int(i) not in picked and not any(torch.equal(d.inputs[i], d.inputs[j]) for j in picked):
            picked.append(int(i))
    if len(picked) < 3:
        raise DegeneratePlane("dataset has fewer than three distinct samples")
    return tuple(picked)  # type: ignore[return-value]


def plane_coords(resolution: int, margin: float) -> np.ndarray:
    return np.linspace(-margin, 1.0 + margin, resolution)


def plane_points(
    anchors: Sequence[torch.Tensor], resolution: int = 200, margin: float = 0.2, value_range: tuple[float, float] | None = None
) -> torch.Tensor:
    """Inputs on the anchor plane, shape (resolution * resolution, *input_shape).

    Row-major over (v, u): point ``i * r + j`` sits at ``u = coords[j]``, ``v = coords[i]``.
    The plane is built in flattened input space and reshaped per point.
    """
    a0, a1, a2 = (torch.as_tensor(a, dtype=torch.float64) for a in anchors)
    if not (a0.shape == a1.shape == a2.shape):
        raise ShapeMismatch("anchors differ in shape")
    shape = a0.shape
    d1 = (a1 - a0).reshape(-1)
    d2 = (a2 - a0).reshape(-1)
    n1, n2 = torch.linalg.norm(d1), torch.linalg.norm(d2)
    if n1 == 0 or n2 == 0:
        raise DegeneratePlane("anchors with identical inputs do not span a plane")
    if abs(float(d1 @ d2) / float(n1 * n2)) > 1 - 1e-9:
        raise DegeneratePlane("collinear anchors do not span a plane")
    c = torch.as_tensor(plane_coords(resolution, margin))
    v, u = torch.meshgrid(c, c, indexing="ij")
    pts = a0.reshape(1, -1) + u.reshape(-1, 1) * d1 + v.reshape(-1, 1) * d2
    if value_range is not None:
        pts = pts.clamp(*value_range)
    return pts.reshape(-1, *shape).float()


def anchor_uv() -> np.ndarray:
    return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def grid_labels(model: Callable[[torch.Tensor], torch.Tensor], points: torch.Tensor, resolution: int) -> np.ndarray:
    return predict(model, points, batch_size=4096).numpy().reshape(resolution, resolution)


def agreement(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of grid cells with equal labels."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"grids differ in shape: {a.shape} vs {b.shape}")
    return float(np.mean(a == b))


def write_grid_csv(labels: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(labels.tolist())
    return path


def read_grid_csv(path: str | Path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        return np.array([[int(v) for v in row] for row in csv.reader(fh)])


def render(labels: np.ndarray, path: str | Path, margin: float = 0.2, anchor_labels: Sequence[int] = (), title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import ListedColormap

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = max(int(labels.max()) + 1, len(set(anchor_labels)) or 1, 2)
    cmap = ListedColormap([PALETTE[i % len(PALETTE)] for i in range(k)])
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    ax.imshow(labels, origin="lower", cmap=cmap, vmin=-0.5, vmax=k - 0.5,
              extent=(-margin, 1 + margin, -margin, 1 + margin), interpolation="nearest")
    for (u, v), y in zip(anchor_uv(), anchor_labels):
        ax.scatter([u], [v], c=[PALETTE[y % len(PALETTE)]], edgecolors="black", s=60, zorder=3)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


@dataclass
class BoundaryGrids:
    labels: dict[str, np.ndarray]
    anchors: tuple[int, int, int]
    spec: BoundaryPlotSpec

    def agree(self, a: str, b: str) -> float:
        return agreement(self.labels[a], self.labels[b])


def boundary_grids(models: dict[str, Callable], d: Dataset, spec: BoundaryPlotSpec = BoundaryPlotSpec()) -> BoundaryGrids:
    """Label grids for several models on one shared anchor plane."""
    anchors = spec.anchors or choose_anchors(d, spec.seed)
    pts = plane_points([d.inputs[i] for i in anchors], spec.resolution, spec.margin, d.meta.get("value_range"))
    labels = {name: grid_labels(m, pts, spec.resolution) for name, m in models.items()}
    return BoundaryGrids(labels, tuple(anchors), spec)


def plot_decision_boundary(
    checkpoint: str | Path, spec: BoundaryPlotSpec = BoundaryPlotSpec(), out_dir: str | Path | None = None
) -> BoundaryGrids:
    """Rebuild every model path stored in a checkpoint and grid-classify the anchor plane of its test split.

    Writes ``<path>.csv`` and ``<path>.png`` per model path when ``out_dir`` is given.
    """
    from .trainer import load_models

    loaded = load_models(checkpoint)
    grids = boundary_grids(loaded.paths, loaded.data.test, spec)
    if out_dir is not None:
        out = Path(out_dir)
        ys = [int(loaded.data.test.labels[i]) for i in grids.anchors]
        for name, lab in grids.labels.items():
            write_grid_csv(lab, out / f"{name}.csv")
            render(lab, out / f"{name}.png", spec.margin, ys, title=f"{loaded.cfg.method}: {name}")
    return grids


__all__ = [
    "BoundaryGrids",
    "BoundaryPlotSpec",
    "agreement",
    "anchor_uv",
    "boundary_grids",
    "choose_anchors",
    "grid_labels",
    "plane_points",
    "plot_decision_boundary",
    "read_grid_csv",
    "render",
    "write_grid_csv",
]
