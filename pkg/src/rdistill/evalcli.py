"""Command-line front end: ``run``, ``ablate``, ``boundary`` and ``cost``.

Exit codes: 0 success, 1 validation error, 2 aborted run.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import yaml
from torch import nn

from . import config as config_mod
from .boundary import BoundaryPlotSpec, agreement, plot_decision_boundary
from .config import METHODS, ExperimentConfig
from .errors import ConfigError, RDError, TrainingAborted
from .reprogram import FrozenTeacher, TeacherPath, build_adapter, load_checkpoint
from .trainer import RunArtifacts, train
from .zoo import FLOP_CONVENTION, CostReport, build_classifier, build_model, cost_report

log = logging.getLogger(__name__)

ABLATION_ORDER = ("student_only", "direct_reprog", "rd_no_cka", "rd_full", "kd_only")
# (direct reprogramming, co-training reprogramming, logits KD, CKA) per method
COMPONENTS = {
    "student_only": (False, False, False, False),
    "direct_reprog": (True, False, True, False),
    "rd_no_cka": (False, True, True, False),
    "rd_full": (False, True, True, True),
    "kd_only": (False, False, True, False),
}
FAILED = "FAILED"


# ---------------------------------------------------------------- ablation suite


@dataclass
class AblationSuite:
    base: ExperimentConfig
    methods: list[str] = field(default_factory=lambda: ["student_only", "direct_reprog", "rd_no_cka", "rd_full"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def configs(self) -> list[ExperimentConfig]:
        return [self.base.replace(method=m, seed=s) for m in self.ordered_methods() for s in self.seeds]

    def ordered_methods(self) -> list[str]:
        return sorted(self.methods, key=ABLATION_ORDER.index)

    def to_dict(self) -> dict:
        return {"base": self.base.to_dict(), "methods": self.ordered_methods(), "seeds": list(self.seeds)}


def suite_from_dict(raw: dict | None) -> AblationSuite:
    raw = raw or {}
    errors = [f"{k}: unknown key" for k in raw if k not in ("base", "methods", "seeds")]
    methods = raw.get("methods", AblationSuite.__dataclass_fields__["methods"].default_factory())
    seeds = raw.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(methods, list) or not methods:
        errors.append("methods: must be a non-empty list")
        methods = []
    for m in methods:
        if m not in METHODS:
            errors.append(f"methods: unknown method {m!r}")
    if len(set(methods)) != len(methods):
        errors.append("methods: duplicates are not allowed")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        errors.append("seeds: must be a non-empty list of integers")
        seeds = []
    base = None
    try:
        base = config_mod.from_dict(raw.get("base"))
    except ConfigError as exc:
        errors += [f"base.{v}" for v in exc.violations]
    if errors:
        raise ConfigError("invalid ablation suite:\n  " + "\n  ".join(errors), errors)
    return AblationSuite(base, list(methods), list(seeds))


def run_dir(out_dir: Path, method: str, seed: int) -> Path:
    return out_dir / method / f"seed_{seed}"


def read_final_accuracy(directory: Path) -> float | None:
    """Final-epoch student test accuracy from a completed run directory, or None if it did not finish."""
    metrics = directory / "metrics.csv"
    if (directory / "abort.json").exists() or not metrics.exists() or not (directory / "summary.json").exists():
        return None
    with metrics.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return float(rows[-1]["test_acc_s"]) if rows else None


def aggregate(out_dir: str | Path, methods: list[str], seeds: list[int]) -> list[dict]:
    """Collect final accuracies from per-run logs into table rows (accuracies in percent)."""
    out_dir = Path(out_dir)
    rows = []
    for m in sorted(methods, key=ABLATION_ORDER.index):
        accs = {s: read_final_accuracy(run_dir(out_dir, m, s)) for s in seeds}
        ok = [100.0 * a for a in accs.values() if a is not None]
        rows.append({
            "method": m,
            "components": COMPONENTS[m],
            "per_seed": {s: (None if a is None else 100.0 * a) for s, a in accs.items()},
            "mean": statistics.fmean(ok) if ok else None,
            "std": statistics.stdev(ok) if len(ok) > 1 else (0.0 if ok else None),
        })
    return rows


def _fmt(v: float | None) -> str:
    return FAILED if v is None else f"{v:.2f}"


def format_table(rows: list[dict], seeds: list[int]) -> list[list[str]]:
    header = ["method", "di_reprog", "co_reprog", "kd", "cka", *[f"seed_{s}" for s in seeds], "mean", "std"]
    body = [header]
    for r in rows:
        marks = ["x" if c else "" for c in r["components"]]
        body.append([r["method"], *marks, *[_fmt(r["per_seed"][s]) for s in seeds], _fmt(r["mean"]), _fmt(r["std"])])
    return body


def write_table(table: list[list[str]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(table)
    return path


def run_ablation(suite: AblationSuite, out_dir: str | Path) -> list[list[str]]:
    """Run every (method, seed) member, then build the table from the per-run logs.

    A member that aborts is recorded as FAILED and the suite carries on.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "suite.resolved.yaml").write_text(yaml.safe_dump(suite.to_dict(), sort_keys=False))
    for cfg in suite.configs():
        d = run_dir(out_dir, cfg.method, cfg.seed)
        try:
            train(cfg, d)
        except (TrainingAborted, RDError) as exc:
            log.warning("run %s seed %d failed: %s", cfg.method, cfg.seed, exc)
            d.mkdir(parents=True, exist_ok=True)
            if not (d / "abort.json").exists():
                (d / "abort.json").write_text(json.dumps({"error": str(exc)}))
    table = format_table(aggregate(out_dir, suite.methods, suite.seeds), suite.seeds)
    write_table(table, out_dir / "ablation.csv")
    return table


# ---------------------------------------------------------------- cost table


def cost_table(cfg: ExperimentConfig, batch: int | None = None, runs: int = 30) -> list[CostReport]:
    """Cost rows for the deployed student and the teacher + adapter pipeline it replaces."""
    shape = cfg.input_shape() if cfg.data.source != "separable" else (cfg.data.dim,)
    n_cls = cfg.data.num_classes if cfg.data.source != "separable" else 2
    batch = batch or cfg.batch_size
    teacher = FrozenTeacher(build_model(cfg.teacher_spec(n_cls, shape), seed=0), name=cfg.teacher.name)
    adapter = build_adapter(teacher.output_dim, cfg.shared_dim, cfg.adapter.depth, seed=0)
    shared = build_classifier(cfg.shared_dim, n_cls, seed=0)
    student = build_model(cfg.student_spec(n_cls, shape), seed=0)
    return [
        cost_report(f"{cfg.teacher.family}+adapter", TeacherPath(teacher, adapter, shared), shape, batch, runs),
        cost_report(cfg.student.family, nn.Sequential(student, build_classifier(cfg.shared_dim, n_cls, seed=0)), shape, batch, runs),
    ]


def write_cost_csv(reports: list[CostReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# {FLOP_CONVENTION}\n")
        w = csv.DictWriter(fh, fieldnames=CostReport.FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    return path


def read_cost_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


# ---------------------------------------------------------------- CLI


def _load_config(path: str | None, seed: int | None) -> tuple[ExperimentConfig, str | None]:
    text = Path(path).read_text() if path else None
    cfg = config_mod.loads(text) if text is not None else config_mod.from_dict({})
    if seed is not None:
        cfg = cfg.replace(seed=seed)
        text = None  # the launched config is the overridden one
    return cfg, text


def _fail(exc: Exception, code: int):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


common = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--seed", type=int, default=None, help="Override the seed in the config."),
    click.option("--out-dir", type=click.Path(file_okay=False), default="runs", show_default=True),
    click.option("--dry-run", is_flag=True, help="Print the resolved configuration and exit."),
]


def with_common(f):
    for opt in reversed(common):
        f = opt(f)
    return f


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool):
    """Reprogramming-distillation experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@with_common
def run(config_path, seed, out_dir, dry_run):
    """Train one configuration."""
    try:
        cfg, text = _load_config(config_path, seed)
    except ConfigError as exc:
        _fail(exc, 1)
    if dry_run:
        click.echo(cfg.to_yaml(), nl=False)
        return
    try:
        art: RunArtifacts = train(cfg, out_dir, config_text=text)
    except TrainingAborted as exc:
        _fail(exc, 2)
    except RDError as exc:
        _fail(exc, 1)
    click.echo(
        f"{cfg.method}: final test acc student={art.final_test_acc_s:.4f} teacher-path={art.final_test_acc_t:.4f} "
        f"(best student {art.best_test_acc_s:.4f} @ epoch {art.best_epoch}) -> {out_dir}"
    )


@main.command()
@with_common
def ablate(config_path, seed, out_dir, dry_run):
    """Run an ablation suite and write ablation.csv."""
    try:
        raw = yaml.safe_load(Path(config_path).read_text()) if config_path else {}
        if seed is not None:
            raw = {**(raw or {}), "seeds": [seed]}
        suite = suite_from_dict(raw)
    except (ConfigError, yaml.YAMLError) as exc:
        _fail(exc, 1)
    if dry_run:
        click.echo(yaml.safe_dump(suite.to_dict(), sort_keys=False), nl=False)
        return
    table = run_ablation(suite, out_dir)
    for row in table:
        click.echo(",".join(row))


@main.command()
@with_common
@click.option("--checkpoint", "checkpoints", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--resolution", type=int, default=None)
def boundary(config_path, seed, out_dir, dry_run, checkpoints, resolution):
    """Grid-classify an anchor plane for every model path in the given checkpoints.

    --config takes an optional YAML with keys resolution, margin, anchors.
    """
    try:
        raw = yaml.safe_load(Path(config_path).read_text()) if config_path else {}
        raw = raw or {}
        unknown = [k for k in raw if k not in ("resolution", "margin", "anchors")]
        if unknown:
            raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
        spec = BoundaryPlotSpec(
            anchors=tuple(raw["anchors"]) if raw.get("anchors") else None,
            resolution=resolution or raw.get("resolution", 200),
            margin=raw.get("margin", 0.2),
            seed=seed or 0,
        )
    except (RDError, ValueError, yaml.YAMLError) as exc:
        _fail(exc, 1)
    if dry_run:
        click.echo(yaml.safe_dump({"checkpoints": list(checkpoints), **spec.__dict__}, sort_keys=False), nl=False)
        return
    out = Path(out_dir)
    grids = {}
    for i, ck in enumerate(checkpoints):
        sub = out / f"{i}_{Path(ck).parent.name or Path(ck).stem}"
        try:
            g = plot_decision_boundary(ck, spec, sub)
        except RDError as exc:
            _fail(exc, 1)
        (sub / "config.resolved.yaml").write_text(
            yaml.safe_dump(load_checkpoint(ck)["config"], sort_keys=False)
        )
        for name, lab in g.labels.items():
            grids[f"{sub.name}/{name}"] = lab
    names = sorted(grids)
    rows = [["a", "b", "agreement"]]
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            if grids[a].shape == grids[b].shape:
                rows.append([a, b, f"{agreement(grids[a], grids[b]):.6f}"])
    write_table(rows, out / "agreement.csv")
    for r in rows:
        click.echo(",".join(r))


@main.command()
@with_common
@click.option("--runs", type=int, default=30, show_default=True, help="Timed batches per model.")
def cost(config_path, seed, out_dir, dry_run, runs):
    """Params / FLOPs / latency for the student and the teacher + adapter pipeline."""
    try:
        cfg, _ = _load_config(config_path, seed)
    except ConfigError as exc:
        _fail(exc, 1)
    if dry_run:
        click.echo(cfg.to_yaml(), nl=False)
        return
    reports = cost_table(cfg, runs=runs)
    out = Path(out_dir)
    write_cost_csv(reports, out / "cost.csv")
    (out / "config.resolved.yaml").write_text(cfg.to_yaml())
    click.echo(f"# {FLOP_CONVENTION}")
    click.echo(f"{'model':28s} {'Params(M)':>10s} {'FLOPs(G)':>10s} {'Time(ms)':>10s}")
    for r in reports:
        params = (r.params_trainable + r.params_frozen) / 1e6
        click.echo(f"{r.name:28s} {params:10.4f} {r.flops / 1e9:10.5f} {r.latency_ms:10.3f}")


if __name__ == "__main__":
    main()
