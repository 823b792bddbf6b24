"""Teacher training (Standard / SoTeacher / ablations) and vanilla KD students."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .datagen import MixedFeatureDataset
from .evalcal import accuracy
from .netlib import (Network, lipschitz_penalty_graph, load_checkpoint, predict_batched,
                     save_checkpoint, softmax_np)
from .regularize import PredictionBuffer, ScheduleSpec, consistency_loss, cr_weight, update_buffer
from .rng import substream
from .tensor import NumericOverflowError, OptimizerConfig, forward_backward, lr_at, sgd_step

MODES = ("standard", "soteacher", "no-lr", "no-cr")
CSV_COLUMNS = ("epoch", "lr", "ce", "lr_penalty", "cr_penalty", "lambda_cr", "train_acc", "test_acc")


class TrainingDiverged(RuntimeError):
    pass


class IncompatibleModels(ValueError):
    pass


@dataclass(frozen=True)
class TeacherTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lambda_lr: float = 1e-5
    cr_schedule: ScheduleSpec | None = None   # default: linear ramp to 1 over `epochs`
    mode: str = "soteacher"
    checkpoint_every: int = 10
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs, batch_size and checkpoint_every must be positive")
        if self.lambda_lr < 0:
            raise ValueError("lambda_lr must be nonnegative")
        if self.cr_schedule is None:
            object.__setattr__(self, "cr_schedule", ScheduleSpec("linear", 1.0, self.epochs))
        elif self.cr_schedule.total_epochs != self.epochs:
            raise ValueError("cr_schedule.total_epochs must equal epochs")

    @property
    def effective_lambda_lr(self) -> float:
        return self.lambda_lr if self.mode in ("soteacher", "no-cr") else 0.0

    @property
    def effective_cr_max(self) -> float:
        return self.cr_schedule.max_weight if self.mode in ("soteacher", "no-lr") else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["decay_milestones"] = list(self.optimizer.decay_milestones)
        return d


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    temperature: float = 4.0
    epochs: int = 30
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["decay_milestones"] = list(self.optimizer.decay_milestones)
        return d


@dataclass
class RunRecord:
    history: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    checkpoints: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    # (epoch, parameter state) pairs kept in memory for checkpoint sweeps
    snapshots: list[tuple[int, dict]] = field(default_factory=list, repr=False)
    buffer: PredictionBuffer | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"config": self.config, "final": self.final, "checkpoints": self.checkpoints,
                "history": self.history}

    def write(self, out_dir, name: str = "run") -> None:
        """Write ``name.json`` and ``name.csv``; checkpoint paths are stored relative to ``out_dir``
        so that identical runs in different directories produce identical files."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = self.to_dict()
        payload["checkpoints"] = [os.path.relpath(c, out) for c in self.checkpoints]
        (out / f"{name}.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
        with (out / f"{name}.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for row in self.history:
                writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})


def _epoch_inputs(data: MixedFeatureDataset, augment: bool, rng: np.random.Generator) -> np.ndarray:
    tf = data.transforms
    if augment and tf is not None and not tf.is_identity and data.base_patches is not None:
        return tf.apply_random(data.base_patches, rng)
    return data.patches


def _eval_accuracies(net: Network, eval_sets: dict[str, MixedFeatureDataset] | None) -> dict:
    out = {}
    for name, ds in (eval_sets or {}).items():
        out[f"{name}_acc"] = accuracy(predict_batched(net, ds.patches), ds.labels)
    return out


def train_teacher(net: Network, data: MixedFeatureDataset, cfg: TeacherTrainConfig, *,
                  eval_sets: dict[str, MixedFeatureDataset] | None = None,
                  out_dir=None, eval_every: int = 1) -> RunRecord:
    """Minimize CE + lambda_LR * Lip + lambda_CR(t) * consistency with momentum SGD.

    Checkpoints (parameters plus the prediction buffer) are taken every
    ``cfg.checkpoint_every`` epochs and after the last epoch; they are kept in
    ``record.snapshots`` and, when ``out_dir`` is given, written to
    ``out_dir/checkpoints/epoch_XXXX``.
    """
    if (data.n_patches, data.patch_dim, data.n_classes) != (net.n_patches, net.patch_dim, net.n_classes):
        raise IncompatibleModels("network and dataset dimensions differ")
    n, k = len(data), data.n_classes
    lam_lr = cfg.effective_lambda_lr
    cr_on = cfg.effective_cr_max > 0
    schedule = cfg.cr_schedule
    onehot = np.eye(k)[data.labels]
    buffer = PredictionBuffer.empty(n, k) if cr_on else None
    rng_shuffle = substream(cfg.seed, "shuffle")
    rng_aug = substream(cfg.seed, "augment")
    params = net.params
    record = RunRecord(config={"teacher": cfg.to_dict(), "architecture": net.architecture()})

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.optimizer)
        lam_cr = cr_weight(schedule, epoch) if cr_on else 0.0
        perm = rng_shuffle.permutation(n)
        x_all = _epoch_inputs(data, cfg.augment, rng_aug)
        sums = {"loss": 0.0, "ce": 0.0, "lr_penalty": 0.0, "cr_penalty": 0.0, "correct": 0.0}
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            parts = {}

            def graph(x):
                logits = net.logits(x)
                logf = logits if net.head == "modified-softmax" else T.log_softmax(logits, axis=-1)
                ce = T.neg(T.mean(T.sum(T.mul(onehot[idx], logf), axis=1)))
                total = ce
                parts["ce"] = ce.item()
                parts["lr_penalty"] = parts["cr_penalty"] = 0.0
                if lam_lr > 0:
                    lip = lipschitz_penalty_graph(net)
                    parts["lr_penalty"] = lip.item()
                    total = T.add(total, T.mul(lam_lr, lip))
                probs = T.softmax(logits, axis=-1)
                parts["probs"] = probs.data
                if cr_on and epoch > 0 and lam_cr > 0:
                    cr = consistency_loss(probs, buffer.mean[idx], epoch)
                    parts["cr_penalty"] = cr.item()
                    total = T.add(total, T.mul(lam_cr, cr))
                return total

            try:
                loss, grads = forward_backward(graph, [x_all[idx]], params)
                sgd_step(params, grads, lr, cfg.optimizer)
            except NumericOverflowError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, batch {batch_no}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            if cr_on:
                update_buffer(buffer, idx, parts["probs"])
            w = len(idx)
            sums["loss"] += loss * w
            for key in ("ce", "lr_penalty", "cr_penalty"):
                sums[key] += parts[key] * w
            sums["correct"] += float((np.argmax(parts["probs"], axis=1) == data.labels[idx]).sum())

        row = {"epoch": epoch, "lr": lr, "lambda_lr": lam_lr, "lambda_cr": lam_cr,
               "loss": sums["loss"] / n, "ce": sums["ce"] / n,
               "lr_penalty": sums["lr_penalty"] / n, "cr_penalty": sums["cr_penalty"] / n,
               "train_acc": sums["correct"] / n}
        last = epoch == cfg.epochs - 1
        if eval_sets and (last or (epoch + 1) % eval_every == 0):
            row.update(_eval_accuracies(net, eval_sets))
        record.history.append(row)

        if (epoch + 1) % cfg.checkpoint_every == 0 or last:
            record.snapshots.append((epoch + 1, net.state()))
            if out_dir is not None:
                path = Path(out_dir) / "checkpoints" / f"epoch_{epoch + 1:04d}"
                extras = buffer.arrays() if buffer is not None else None
                save_checkpoint(net, path, epoch=epoch + 1, config=record.config, extra_arrays=extras)
                record.checkpoints.append(str(path))

    record.buffer = buffer
    record.final = {k: v for k, v in record.history[-1].items()}
    return record


def _teacher_logits(teacher_probs: np.ndarray) -> np.ndarray:
    logits = np.log(teacher_probs + 1e-12)
    return logits - logits.mean(axis=1, keepdims=True)


def kd_loss(student_logits, teacher_probs: np.ndarray, labels: np.ndarray,
            alpha: float, temperature: float) -> T.Tensor:
    """alpha * CE(student, y) + (1 - alpha) * tau^2 * KL(teacher_tau || student_tau), batch mean.

    Teacher logits are recovered as zero-mean ``log(p + 1e-12)``.  At alpha = 1
    the teacher term is dropped entirely.
    """
    s = T.as_tensor(student_logits)
    k = s.shape[1]
    labels = np.asarray(labels)
    total = None
    if alpha > 0:
        onehot = np.eye(k)[labels]
        ce = T.neg(T.mean(T.sum(T.mul(onehot, T.log_softmax(s, axis=1)), axis=1)))
        total = T.mul(alpha, ce)
    if alpha < 1:
        q = softmax_np(_teacher_logits(np.asarray(teacher_probs, dtype=np.float64)) / temperature)
        log_q = np.log(np.maximum(q, 1e-300))
        log_p = T.log_softmax(T.mul(s, 1.0 / temperature), axis=1)
        kl = T.mean(T.sum(T.mul(q, T.add(log_q, T.neg(log_p))), axis=1))
        term = T.mul((1.0 - alpha) * temperature ** 2, kl)
        total = term if total is None else T.add(total, term)
    return total


def _resolve_teacher(teacher) -> Network | None:
    if teacher is None or isinstance(teacher, Network):
        return teacher
    if isinstance(teacher, dict):
        raise TypeError("pass a Network or a checkpoint directory")
    net, _ = load_checkpoint(teacher)
    return net


def train_student(student: Network, teacher, data: MixedFeatureDataset, cfg: DistillConfig, *,
                  eval_sets: dict[str, MixedFeatureDataset] | None = None,
                  eval_every: int = 1, teacher_fn=None) -> RunRecord:
    """Vanilla KD from a frozen teacher (Network or checkpoint directory).

    Teacher probabilities are recomputed on every (possibly transformed) batch.
    ``teacher_fn`` may replace the teacher by any callable mapping
    (batch inputs, example ids) to probabilities, e.g. a ground-truth oracle.
    With ``teacher=None`` and ``alpha=1`` this is plain supervised training.
    """
    teacher = _resolve_teacher(teacher)
    if teacher is None and teacher_fn is None and cfg.alpha < 1:
        raise ValueError("a teacher is required unless alpha == 1")
    if teacher is not None:
        if teacher.n_classes != student.n_classes:
            raise IncompatibleModels(f"teacher has {teacher.n_classes} classes, "
                                     f"student {student.n_classes}")
        if (teacher.n_patches, teacher.patch_dim) != (student.n_patches, student.patch_dim):
            raise IncompatibleModels("teacher and student input shapes differ")
    if (data.n_patches, data.patch_dim, data.n_classes) != (student.n_patches, student.patch_dim,
                                                            student.n_classes):
        raise IncompatibleModels("student and dataset dimensions differ")
    n = len(data)
    rng_shuffle = substream(cfg.seed, "shuffle")
    rng_aug = substream(cfg.seed, "augment")
    params = student.params
    record = RunRecord(config={"student": cfg.to_dict(), "architecture": student.architecture()})

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.optimizer)
        perm = rng_shuffle.permutation(n)
        x_all = _epoch_inputs(data, cfg.augment, rng_aug)
        loss_sum, correct = 0.0, 0.0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            xb = x_all[idx]
            if cfg.alpha < 1:
                t_probs = teacher_fn(xb, idx) if teacher_fn is not None else \
                    predict_batched(teacher, xb, normalize=True)
            else:
                t_probs = None
            holder = {}

            def graph(x):
                logits = student.logits(x)
                holder["logits"] = logits.data
                return kd_loss(logits, t_probs, data.labels[idx], cfg.alpha, cfg.temperature)

            try:
                loss, grads = forward_backward(graph, [xb], params)
                sgd_step(params, grads, lr, cfg.optimizer)
            except NumericOverflowError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, batch {batch_no}: {exc}") from exc
            loss_sum += loss * len(idx)
            correct += float((np.argmax(holder["logits"], axis=1) == data.labels[idx]).sum())
        row = {"epoch": epoch, "lr": lr, "loss": loss_sum / n, "ce": loss_sum / n,
               "lr_penalty": 0.0, "cr_penalty": 0.0, "lambda_cr": 0.0, "train_acc": correct / n}
        last = epoch == cfg.epochs - 1
        if eval_sets and (last or (epoch + 1) % eval_every == 0):
            row.update(_eval_accuracies(student, eval_sets))
        record.history.append(row)
    record.final = dict(record.history[-1])
    return record


def network_from_snapshot(template: Network, state: dict) -> Network:
    net = template.copy()
    net.load_state(state)
    return net


def with_mode(cfg: TeacherTrainConfig, mode: str, **changes) -> TeacherTrainConfig:
    return replace(cfg, mode=mode, **changes)
