"""Co-training loop, the in-repo baselines, evaluation and run artifacts.

Methods:

* ``rd_full``       adapter, student and shared classifier trained jointly on CE + weighted (CE_t, KL + CKA)
* ``rd_no_cka``     same without the CKA term
* ``direct_reprog`` two stages: adapter + classifier on CE_t, then a fresh student distilled with CE + KL
* ``kd_only``       student distilled from the teacher's own (pretrained) head, no adapter
* ``student_only``  student and its own classifier on CE alone
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig
from .data import Dataset, batches, load_image_folder, load_manifest, make_separable, make_shifted_pair, split
from .errors import ConfigError, DegenerateFeatures, InvalidInput, TrainingAborted
from .losses import LossWeights, cross_entropy, rd_loss, schedule_weights
from .reprogram import (
    FrozenTeacher,
    RDPipeline,
    TeacherPath,
    build_adapter,
    param_checksum,
    save_checkpoint,
)
from .zoo import build_classifier, build_model, check_pair, seeded

log = logging.getLogger(__name__)


@dataclass
class MetricsRecord:
    epoch: int
    loss_total: float = 0.0
    loss_ce_s: float = 0.0
    loss_ce_t: float = 0.0
    loss_kl: float = 0.0
    loss_cka: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    train_acc_s: float = 0.0
    train_acc_t: float = 0.0
    test_acc_s: float = 0.0
    test_acc_t: float = 0.0
    wall_seconds: float = 0.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def recombined_total(self) -> float:
        return self.loss_ce_s + self.alpha * self.loss_ce_t + self.beta * (self.loss_kl + self.loss_cka)


@dataclass
class RunArtifacts:
    method: str
    records: list[MetricsRecord]
    final_test_acc_s: float
    final_test_acc_t: float
    best_test_acc_s: float
    best_epoch: int
    teacher_checksum_before: str | None = None
    teacher_checksum_after: str | None = None
    out_dir: Path | None = None
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    metrics_path: Path | None = None
    config_path: Path | None = None
    stages: list[dict] = field(default_factory=list)
    info: dict = field(default_factory=dict)
    models: dict[str, nn.Module] = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------- evaluation


def predict(model: Callable[[torch.Tensor], torch.Tensor], inputs: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    """Argmax predictions in inference mode."""
    modules = [model] if isinstance(model, nn.Module) else []
    modes = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        with torch.no_grad():
            out = [model(inputs[i : i + batch_size]).argmax(dim=1) for i in range(0, len(inputs), batch_size)]
    finally:
        for m, mode in zip(modules, modes):
            m.train(mode)
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def evaluate(model: Callable[[torch.Tensor], torch.Tensor], test: Dataset, batch_size: int = 1024) -> float:
    """Top-1 accuracy over the full dataset."""
    if len(test) == 0:
        raise InvalidInput("cannot evaluate on an empty dataset")
    pred = predict(model, test.inputs, batch_size)
    return float((pred == test.labels).float().mean().item())


# ---------------------------------------------------------------- setup


@dataclass
class PreparedData:
    pretrain_train: Dataset | None
    pretrain_test: Dataset | None
    train: Dataset
    test: Dataset


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    d = cfg.data
    s = cfg.split_spec()
    if d.source == "synthetic":
        pre, down = make_shifted_pair(cfg.data_seed, cfg.shift_spec(), cfg.synthetic_spec())
    elif d.source == "separable":
        pre = make_separable(d.n_pretrain, cfg.data_seed, d.dim, name="separable-pretrain")
        down = make_separable(d.n_downstream, cfg.data_seed, d.dim, name="separable", draw=1)
    else:
        loader = load_image_folder if d.source == "folder" else load_manifest
        down = loader(d.path, d.image_size, d.channels)
        pre = loader(d.pretrain_path, d.image_size, d.channels) if d.pretrain_path else None
    train, test = split(down, s)
    pre_train = pre_test = None
    if pre is not None:
        pre_train, pre_test = split(pre, s)
    return PreparedData(pre_train, pre_test, train, test)


_TEACHERS: dict[str, FrozenTeacher] = {}


def _teacher_key(cfg: ExperimentConfig) -> str:
    return json.dumps({"teacher": asdict(cfg.teacher), "data": asdict(cfg.data), "seed": cfg.data_seed}, sort_keys=True)


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Single-threaded, deterministic kernels for the duration of the block."""
    if not enabled:
        yield
        return
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_num_threads(prev_threads)


def _make_optimizer(cfg: ExperimentConfig, params, lr: float | None = None) -> torch.optim.Optimizer:
    o = cfg.optimizer
    lr = o.lr if lr is None else lr
    if o.name == "adamw":
        return torch.optim.AdamW(params, lr=lr, weight_decay=o.weight_decay)
    if o.name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=o.weight_decay)
    return torch.optim.SGD(params, lr=lr, momentum=0.9, weight_decay=o.weight_decay)


def _epoch_seed(seed: int, epoch: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, epoch, stream]).generate_state(1)[0])


def pretrain_teacher(cfg: ExperimentConfig, data: PreparedData, use_cache: bool = True) -> FrozenTeacher:
    """Train the teacher backbone and its head on the pretraining domain, then freeze it.

    Results are memoised per (teacher config, data config, data seed), so every
    method in a sweep sees the same teacher for a given seed.
    """
    key = _teacher_key(cfg)
    if use_cache and key in _TEACHERS:
        return _TEACHERS[key]
    if data.pretrain_train is None:
        raise ConfigError("the teacher needs a pretraining dataset (data.pretrain_path)")
    pre = data.pretrain_train
    seed = cfg.data_seed
    spec = cfg.teacher_spec(pre.num_classes, pre.input_shape)
    backbone = build_model(spec, seed=seed + 101)
    head = build_classifier(spec.feature_dim, pre.num_classes, seed=seed + 102)
    params = [p for p in list(backbone.parameters()) + list(head.parameters()) if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.teacher.pretrain_lr, weight_decay=cfg.optimizer.weight_decay)
    with deterministic_mode(cfg.deterministic), seeded(seed + 103):
        backbone.train()
        for epoch in range(cfg.teacher.pretrain_epochs):
            for x, y in batches(pre, cfg.teacher.pretrain_batch_size, _epoch_seed(seed, epoch, 9)):
                loss = cross_entropy(head(backbone(x)), y)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        backbone.eval()
        teacher = FrozenTeacher(backbone, head, name=cfg.teacher.name, cache=not cfg.data.flip)
        acc = evaluate(lambda x: teacher.logits(x), data.pretrain_test) if data.pretrain_test else float("nan")
    teacher.pretrain_accuracy = acc
    log.info("teacher %s pretrained: pretrain-domain test acc %.4f", teacher.name, acc)
    if use_cache:
        _TEACHERS[key] = teacher
    return teacher


def clear_teacher_cache() -> None:
    _TEACHERS.clear()


def build_pipeline(cfg: ExperimentConfig, teacher: FrozenTeacher, num_classes: int) -> RDPipeline:
    student = build_model(cfg.student_spec(num_classes, teacher.input_shape), seed=cfg.seed * 1000 + 1)
    adapter = build_adapter(teacher.output_dim, cfg.shared_dim, cfg.adapter.depth, seed=cfg.seed * 1000 + 2)
    classifier = build_classifier(cfg.shared_dim, num_classes, seed=cfg.seed * 1000 + 3)
    return RDPipeline(teacher, adapter, student, classifier)


# ---------------------------------------------------------------- run bookkeeping


class _Run:
    """Per-run output handling: metrics CSV, checkpoints, config snapshot, timing."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str | Path | None, config_text: str | None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.records: list[MetricsRecord] = []
        self.timing: list[float] = []
        self.best_acc = -1.0
        self.best_epoch = -1
        self.t0 = time.perf_counter()
        self.metrics_path = self.config_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.config_path = self.out_dir / "config.yaml"
            self.config_path.write_text(config_text if config_text is not None else cfg.to_yaml())
            (self.out_dir / "config.resolved.yaml").write_text(cfg.to_yaml())
            self.metrics_path = self.out_dir / "metrics.csv"
            with self.metrics_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(MetricsRecord.columns())

    def log(self, rec: MetricsRecord, checkpoint_modules: dict[str, nn.Module], teacher: FrozenTeacher | None) -> None:
        elapsed = time.perf_counter() - self.t0
        self.timing.append(elapsed)
        # wall time is not reproducible; deterministic runs keep it out of the metrics log
        rec.wall_seconds = 0.0 if self.cfg.deterministic else round(elapsed, 3)
        if abs(rec.recombined_total() - rec.loss_total) > 1e-6 * max(1.0, abs(rec.loss_total)):
            raise AssertionError(f"loss decomposition broken at epoch {rec.epoch}: {rec}")
        self.records.append(rec)
        log.info(
            "epoch %d total=%.4f acc_s=%.4f acc_t=%.4f", rec.epoch, rec.loss_total, rec.test_acc_s, rec.test_acc_t
        )
        if self.metrics_path is not None:
            with self.metrics_path.open("a", newline="") as fh:
                csv.writer(fh).writerow([getattr(rec, c) for c in MetricsRecord.columns()])
        if rec.test_acc_s > self.best_acc:
            self.best_acc, self.best_epoch = rec.test_acc_s, rec.epoch
            self.save("checkpoint_best.pt", checkpoint_modules, teacher, rec.epoch)

    def save(self, name: str, modules: dict[str, nn.Module], teacher: FrozenTeacher | None, epoch: int):
        if self.out_dir is None:
            return None
        return save_checkpoint(
            self.out_dir / name, modules, self.cfg.to_dict(), teacher, method=self.cfg.method, epoch=epoch
        )

    def abort(self, message: str, diagnostic: dict) -> None:
        if self.out_dir is not None:
            (self.out_dir / "abort.json").write_text(json.dumps({"error": message, **diagnostic}, indent=2, default=str))
        raise TrainingAborted(message, diagnostic)

    def finish(self, modules: dict[str, nn.Module], teacher: FrozenTeacher | None, **extra) -> RunArtifacts:
        last = self.records[-1]
        final_ckpt = self.save("checkpoint_final.pt", modules, teacher, last.epoch)
        if self.out_dir is not None:
            (self.out_dir / "timing.json").write_text(json.dumps({"epoch_end_seconds": self.timing}, indent=2))
        art = RunArtifacts(
            method=self.cfg.method,
            records=self.records,
            final_test_acc_s=last.test_acc_s,
            final_test_acc_t=last.test_acc_t,
            best_test_acc_s=self.best_acc,
            best_epoch=self.best_epoch,
            out_dir=self.out_dir,
            checkpoint=final_ckpt,
            best_checkpoint=(self.out_dir / "checkpoint_best.pt") if self.out_dir else None,
            metrics_path=self.metrics_path,
            config_path=self.config_path,
            models=modules,
            **extra,
        )
        if self.out_dir is not None:
            summary = {
                "method": art.method,
                "final_test_acc_s": art.final_test_acc_s,
                "final_test_acc_t": art.final_test_acc_t,
                "best_test_acc_s": art.best_test_acc_s,
                "best_epoch": art.best_epoch,
                "teacher_checksum_before": art.teacher_checksum_before,
                "teacher_checksum_after": art.teacher_checksum_after,
                "stages": art.stages,
                "info": art.info,
            }
            (self.out_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
        return art


class _Accumulator:
    def __init__(self):
        self.sums: dict[str, float] = defaultdict(float)
        self.n = 0

    def add(self, total: float, parts: dict[str, float]) -> None:
        self.sums["total"] += total
        for k, v in parts.items():
            self.sums[k] += v
        self.n += 1

    def mean(self, key: str) -> float:
        return self.sums[key] / self.n if self.n else 0.0


def _check_finite(run: _Run, total: torch.Tensor, epoch: int, step: int, parts: dict) -> None:
    if not torch.isfinite(total):
        run.abort(f"non-finite loss at epoch {epoch}, step {step}", {"epoch": epoch, "step": step, "parts": parts})


def _check_outputs(run: _Run, epoch: int, step: int, **tensors: torch.Tensor) -> None:
    bad = [k for k, t in tensors.items() if not torch.isfinite(t).all()]
    if bad:
        run.abort(
            f"non-finite model outputs at epoch {epoch}, step {step}: {', '.join(bad)}",
            {"epoch": epoch, "step": step, "outputs": bad},
        )


def _record(epoch: int, acc: _Accumulator, w: LossWeights) -> MetricsRecord:
    return MetricsRecord(
        epoch=epoch,
        loss_total=acc.mean("total"),
        loss_ce_s=acc.mean("ce_s"),
        loss_ce_t=acc.mean("ce_t"),
        loss_kl=acc.mean("kl"),
        loss_cka=acc.mean("cka"),
        alpha=w.alpha,
        beta=w.beta,
    )


StepHook = Callable[[dict], None]


def _setup(cfg: ExperimentConfig, data: PreparedData | None, teacher: FrozenTeacher | None, need_teacher: bool):
    data = data or prepare_data(cfg)
    if need_teacher and teacher is None:
        teacher = pretrain_teacher(cfg, data)
    if teacher is not None:
        shape = data.train.input_shape
        check_pair(cfg.teacher_spec(data.train.num_classes, shape), cfg.student_spec(data.train.num_classes, shape))
        if teacher.cache_enabled:
            # fixed warm-up order keeps cached teacher features independent of run history
            teacher.features(data.train.inputs)
            teacher.features(data.test.inputs)
    return data, teacher


# ---------------------------------------------------------------- methods


def train_rd(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    *,
    data: PreparedData | None = None,
    teacher: FrozenTeacher | None = None,
    config_text: str | None = None,
    on_step: StepHook | None = None,
) -> RunArtifacts:
    """Co-train adapter, student and shared classifier (``rd_full`` or ``rd_no_cka``)."""
    if cfg.method not in ("rd_full", "rd_no_cka"):
        raise ConfigError(f"train_rd handles rd_full / rd_no_cka, not {cfg.method!r}")
    use_cka = cfg.method == "rd_full"
    with deterministic_mode(cfg.deterministic):
        data, teacher = _setup(cfg, data, teacher, need_teacher=True)
        run = _Run(cfg, out_dir, config_text)
        before = teacher.checksum
        pipe = build_pipeline(cfg, teacher, data.train.num_classes)
        opt = _make_optimizer(cfg, pipe.trainable_parameters())
        modules = {"adapter": pipe.adapter, "student": pipe.student, "classifier": pipe.classifier}
        skipped_cka = 0
        with seeded(cfg.seed):
            for epoch in range(cfg.epochs):
                w = schedule_weights(epoch, cfg.epochs, cfg.initial_weight, cfg.final_weight)
                pipe.train()
                acc = _Accumulator()
                for step, (x, y) in enumerate(batches(data.train, cfg.batch_size, _epoch_seed(cfg.seed, epoch), flip=cfg.data.flip)):
                    out = pipe(x)
                    _check_outputs(run, epoch, step, z_t=out.z_t, z_s=out.z_s, f_t=out.f_t, f_s=out.f_s)
                    try:
                        total, parts = rd_loss(y, out.z_t, out.z_s, out.f_t, out.f_s, w, use_cka, cfg.temperature)
                    except DegenerateFeatures as exc:
                        skipped_cka += 1
                        warnings.warn(f"epoch {epoch} step {step}: CKA term skipped ({exc})", stacklevel=1)
                        total, parts = rd_loss(y, out.z_t, out.z_s, None, None, w, False, cfg.temperature)
                    _check_finite(run, total, epoch, step, parts)
                    opt.zero_grad(set_to_none=True)
                    total.backward()
                    if on_step is not None:
                        on_step({"epoch": epoch, "step": step, "pipeline": pipe, "teacher": teacher})
                    opt.step()
                    acc.add(total.item(), parts)
                rec = _record(epoch, acc, w)
                pipe.eval()
                tpath, spath = pipe.teacher_path(), pipe.student_path()
                rec.train_acc_s, rec.train_acc_t = evaluate(spath, data.train), evaluate(tpath, data.train)
                rec.test_acc_s, rec.test_acc_t = evaluate(spath, data.test), evaluate(tpath, data.test)
                run.log(rec, modules, teacher)
        after = param_checksum(teacher)
    return run.finish(
        modules, teacher,
        teacher_checksum_before=before, teacher_checksum_after=after,
        info={"cka_skipped_batches": skipped_cka, "teacher_pretrain_acc": getattr(teacher, "pretrain_accuracy", None)},
    )


def train_student_only(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    *,
    data: PreparedData | None = None,
    config_text: str | None = None,
    on_step: StepHook | None = None,
    **_ignored,
) -> RunArtifacts:
    """Plain supervised student with its own classifier; cross entropy only."""
    with deterministic_mode(cfg.deterministic):
        data, _ = _setup(cfg, data, None, need_teacher=False)
        run = _Run(cfg, out_dir, config_text)
        n_cls = data.train.num_classes
        student = build_model(cfg.student_spec(n_cls, data.train.input_shape), seed=cfg.seed * 1000 + 1)
        classifier = build_classifier(cfg.shared_dim, n_cls, seed=cfg.seed * 1000 + 3)
        model = nn.Sequential(student, classifier)
        opt = _make_optimizer(cfg, model.parameters())
        modules = {"student": student, "classifier": classifier}
        zero = LossWeights(0.0, 0.0)
        with seeded(cfg.seed):
            for epoch in range(cfg.epochs):
                model.train()
                acc = _Accumulator()
                for step, (x, y) in enumerate(batches(data.train, cfg.batch_size, _epoch_seed(cfg.seed, epoch), flip=cfg.data.flip)):
                    z = model(x)
                    _check_outputs(run, epoch, step, z_s=z)
                    loss = cross_entropy(z, y)
                    parts = {"ce_s": loss.item(), "ce_t": 0.0, "kl": 0.0, "cka": 0.0}
                    _check_finite(run, loss, epoch, step, parts)
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    if on_step is not None:
                        on_step({"epoch": epoch, "step": step, "model": model})
                    opt.step()
                    acc.add(loss.item(), parts)
                rec = _record(epoch, acc, zero)
                rec.train_acc_s, rec.test_acc_s = evaluate(model, data.train), evaluate(model, data.test)
                run.log(rec, modules, None)
    return run.finish(modules, None)


def train_direct_reprog(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    *,
    data: PreparedData | None = None,
    teacher: FrozenTeacher | None = None,
    config_text: str | None = None,
    on_step: StepHook | None = None,
) -> RunArtifacts:
    """Two-stage baseline: reprogram first, distil afterwards.

    Stage A (first half of the epochs) trains adapter + classifier on CE of the
    teacher path alone. Stage B freezes both and distils into a student that has
    its own classifier, with CE + beta * KL and beta decaying over stage B.
    """
    with deterministic_mode(cfg.deterministic):
        data, teacher = _setup(cfg, data, teacher, need_teacher=True)
        run = _Run(cfg, out_dir, config_text)
        before = teacher.checksum
        n_cls = data.train.num_classes
        pipe = build_pipeline(cfg, teacher, n_cls)
        student = pipe.student
        student_head = build_classifier(cfg.shared_dim, n_cls, seed=cfg.seed * 1000 + 4)
        tpath = pipe.teacher_path()
        spath = nn.Sequential(student, student_head)
        modules = {"adapter": pipe.adapter, "classifier": pipe.classifier, "student": student, "student_classifier": student_head}
        epochs_a = cfg.epochs // 2
        epochs_b = cfg.epochs - epochs_a
        stages = [
            {"stage": "A", "first_epoch": 0, "epochs": epochs_a, "trains": ["adapter", "classifier"]},
            {"stage": "B", "first_epoch": epochs_a, "epochs": epochs_b, "trains": ["student", "student_classifier"]},
        ]
        log.info("direct_reprog stages: %s", stages)

        def eval_into(rec: MetricsRecord) -> None:
            rec.train_acc_s, rec.train_acc_t = evaluate(spath, data.train), evaluate(tpath, data.train)
            rec.test_acc_s, rec.test_acc_t = evaluate(spath, data.test), evaluate(tpath, data.test)

        with seeded(cfg.seed):
            opt_a = _make_optimizer(cfg, list(pipe.adapter.parameters()) + list(pipe.classifier.parameters()))
            w_a = LossWeights(1.0, 0.0)
            for epoch in range(epochs_a):
                pipe.adapter.train()
                acc = _Accumulator()
                for step, (x, y) in enumerate(batches(data.train, cfg.batch_size, _epoch_seed(cfg.seed, epoch), flip=cfg.data.flip)):
                    z_t = tpath(x)
                    _check_outputs(run, epoch, step, z_t=z_t)
                    loss = cross_entropy(z_t, y)
                    parts = {"ce_s": 0.0, "ce_t": loss.item(), "kl": 0.0, "cka": 0.0}
                    _check_finite(run, loss, epoch, step, parts)
                    opt_a.zero_grad(set_to_none=True)
                    loss.backward()
                    if on_step is not None:
                        on_step({"epoch": epoch, "step": step, "stage": "A", "pipeline": pipe, "teacher": teacher})
                    opt_a.step()
                    acc.add(loss.item(), parts)
                rec = _record(epoch, acc, w_a)
                tpath.eval()
                eval_into(rec)
                run.log(rec, modules, teacher)

            for p in list(pipe.adapter.parameters()) + list(pipe.classifier.parameters()):
                p.requires_grad_(False)
            tpath.eval()
            frozen_sum = param_checksum(nn.ModuleList([pipe.adapter, pipe.classifier]))
            opt_b = _make_optimizer(cfg, spath.parameters())
            for i in range(epochs_b):
                epoch = epochs_a + i
                wb = schedule_weights(i, epochs_b, cfg.initial_weight, cfg.final_weight)
                w = LossWeights(0.0, wb.beta)
                spath.train()
                acc = _Accumulator()
                for step, (x, y) in enumerate(batches(data.train, cfg.batch_size, _epoch_seed(cfg.seed, epoch), flip=cfg.data.flip)):
                    with torch.no_grad():
                        z_t = tpath(x)
                    z_s = spath(x)
                    _check_outputs(run, epoch, step, z_s=z_s)
                    total, parts = rd_loss(y, z_t, z_s, None, None, w, False, cfg.temperature)
                    _check_finite(run, total, epoch, step, parts)
                    opt_b.zero_grad(set_to_none=True)
                    total.backward()
                    if on_step is not None:
                        on_step({"epoch": epoch, "step": step, "stage": "B", "pipeline": pipe, "teacher": teacher})
                    opt_b.step()
                    acc.add(total.item(), parts)
                rec = _record(epoch, acc, w)
                eval_into(rec)
                run.log(rec, modules, teacher)
            stages[1]["adapter_checksum_start"] = frozen_sum
            stages[1]["adapter_checksum_end"] = param_checksum(nn.ModuleList([pipe.adapter, pipe.classifier]))
        after = param_checksum(teacher)
    return run.finish(
        modules, teacher, teacher_checksum_before=before, teacher_checksum_after=after, stages=stages,
        info={"teacher_pretrain_acc": getattr(teacher, "pretrain_accuracy", None)},
    )


def train_kd_only(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    *,
    data: PreparedData | None = None,
    teacher: FrozenTeacher | None = None,
    config_text: str | None = None,
    on_step: StepHook | None = None,
) -> RunArtifacts:
    """Student distilled from the frozen teacher's own pretrained head; no adapter, no co-training."""
    with deterministic_mode(cfg.deterministic):
        data, teacher = _setup(cfg, data, teacher, need_teacher=True)
        if teacher.head is None or teacher.head.out_features != data.train.num_classes:
            raise ConfigError("kd_only needs a teacher head with the downstream class count")
        run = _Run(cfg, out_dir, config_text)
        before = teacher.checksum
        n_cls = data.train.num_classes
        student = build_model(cfg.student_spec(n_cls, data.train.input_shape), seed=cfg.seed * 1000 + 1)
        head = build_classifier(cfg.shared_dim, n_cls, seed=cfg.seed * 1000 + 3)
        spath = nn.Sequential(student, head)
        opt = _make_optimizer(cfg, spath.parameters())
        modules = {"student": student, "classifier": head}
        t_train = evaluate(teacher.logits, data.train)
        t_test = evaluate(teacher.logits, data.test)
        with seeded(cfg.seed):
            for epoch in range(cfg.epochs):
                w = schedule_weights(epoch, cfg.epochs, cfg.initial_weight, cfg.final_weight)
                spath.train()
                acc = _Accumulator()
                for step, (x, y) in enumerate(batches(data.train, cfg.batch_size, _epoch_seed(cfg.seed, epoch), flip=cfg.data.flip)):
                    z_s = spath(x)
                    _check_outputs(run, epoch, step, z_s=z_s)
                    total, parts = rd_loss(y, teacher.logits(x), z_s, None, None, w, False, cfg.temperature)
                    _check_finite(run, total, epoch, step, parts)
                    opt.zero_grad(set_to_none=True)
                    total.backward()
                    if on_step is not None:
                        on_step({"epoch": epoch, "step": step, "model": spath, "teacher": teacher})
                    opt.step()
                    acc.add(total.item(), parts)
                rec = _record(epoch, acc, w)
                rec.train_acc_s, rec.test_acc_s = evaluate(spath, data.train), evaluate(spath, data.test)
                rec.train_acc_t, rec.test_acc_t = t_train, t_test
                run.log(rec, modules, teacher)
        after = param_checksum(teacher)
    return run.finish(
        modules, teacher, teacher_checksum_before=before, teacher_checksum_after=after,
        info={"teacher_pretrain_acc": getattr(teacher, "pretrain_accuracy", None)},
    )


TRAINERS = {
    "rd_full": train_rd,
    "rd_no_cka": train_rd,
    "direct_reprog": train_direct_reprog,
    "kd_only": train_kd_only,
    "student_only": train_student_only,
}


def train(cfg: ExperimentConfig, out_dir: str | Path | None = None, **kwargs) -> RunArtifacts:
    """Dispatch to the trainer for ``cfg.method``."""
    return TRAINERS[cfg.method](cfg, out_dir, **kwargs)


@dataclass
class LoadedRun:
    cfg: ExperimentConfig
    data: PreparedData
    teacher: FrozenTeacher | None
    modules: dict[str, nn.Module]
    paths: dict[str, nn.Module]
    payload: dict


class _TeacherHead(nn.Module):
    def __init__(self, teacher: FrozenTeacher):
        super().__init__()
        self.teacher = teacher

    def forward(self, x):
        return self.teacher.logits(x)


def load_models(checkpoint: str | Path) -> LoadedRun:
    """Rebuild data, teacher and trained modules from a checkpoint archive.

    The teacher is not stored in checkpoints; it is re-pretrained from the
    config snapshot and its checksum compared with the recorded one.
    """
    from .config import from_dict
    from .reprogram import load_checkpoint

    payload = load_checkpoint(checkpoint)
    cfg = from_dict(payload["config"])
    with deterministic_mode(cfg.deterministic):
        data = prepare_data(cfg)
        n_cls, shape = data.train.num_classes, data.train.input_shape
        teacher = None
        if payload.get("teacher"):
            teacher = pretrain_teacher(cfg, data)
            if teacher.checksum != payload["teacher"]["checksum"]:
                warnings.warn("rebuilt teacher checksum differs from the one recorded in the checkpoint", stacklevel=2)
        state = payload["state"]
        modules: dict[str, nn.Module] = {}
        modules["student"] = build_model(cfg.student_spec(n_cls, shape), seed=0)
        modules["classifier"] = build_classifier(cfg.shared_dim, n_cls)
        if "adapter" in state:
            modules["adapter"] = build_adapter(teacher.output_dim, cfg.shared_dim, cfg.adapter.depth)
        if "student_classifier" in state:
            modules["student_classifier"] = build_classifier(cfg.shared_dim, n_cls)
        for name, m in modules.items():
            m.load_state_dict(state[name])
            m.eval()
    paths: dict[str, nn.Module] = {}
    student_head = modules.get("student_classifier", modules["classifier"])
    paths["student"] = nn.Sequential(modules["student"], student_head)
    if "adapter" in modules:
        paths["teacher_path"] = TeacherPath(teacher, modules["adapter"], modules["classifier"])
    elif teacher is not None and teacher.head is not None:
        paths["teacher"] = _TeacherHead(teacher)
    return LoadedRun(cfg, data, teacher, modules, paths, payload)


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(MetricsRecord(**{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()}))
    return out


def downstream_teacher_accuracy(teacher: FrozenTeacher, test: Dataset) -> float:
    """Accuracy of the teacher's own head on downstream data, before any adaptation."""
    return evaluate(teacher.logits, test)


__all__ = [
    "TRAINERS",
    "LoadedRun",
    "MetricsRecord",
    "PreparedData",
    "RunArtifacts",
    "build_pipeline",
    "clear_teacher_cache",
    "deterministic_mode",
    "downstream_teacher_accuracy",
    "evaluate",
    "predict",
    "prepare_data",
    "pretrain_teacher",
    "load_models",
    "read_metrics",
    "train",
    "train_direct_reprog",
    "train_kd_only",
    "train_rd",
    "train_student_only",
]
