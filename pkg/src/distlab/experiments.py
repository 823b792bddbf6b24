"""End-to-end protocols on synthetic data: Standard vs SoTeacher teachers, their
students, and the student-accuracy-vs-teacher-checkpoint sweep."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .datagen import MixedFeatureDataset, TransformSet, random_vocabulary, sample_splits
from .evalcal import accuracy, calibration_report, fidelity
from .netlib import Network, build_network, lipschitz_report, predict_batched
from .regularize import ScheduleSpec
from .tensor import OptimizerConfig
from .trainlab import (DistillConfig, TeacherTrainConfig, network_from_snapshot, train_student,
                       train_teacher)


@dataclass(frozen=True)
class PracticalSetup:
    """A soft-label classification task with a wide teacher and a narrow student."""
    n_features: int = 16
    n_classes: int = 5
    patch_dim: int = 8
    m: int = 3
    concentration: float = 0.3
    representation_scale: float = 0.3
    transform_magnitude: float = 0.5
    transform_count: int = 8
    n_train: int = 8000
    n_holdout: int = 1000
    n_temperature: int = 1000
    n_test: int = 8000
    teacher_hidden: tuple[int, ...] = (128, 128)
    student_hidden: tuple[int, ...] = (32, 32)
    teacher_epochs: int = 60
    student_epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    lambda_lr: float = 1e-3
    cr_max: float = 1.0
    cr_kind: str = "linear"
    checkpoint_every: int = 10
    alpha: float = 0.5
    temperature: float = 4.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["teacher_hidden"] = list(self.teacher_hidden)
        d["student_hidden"] = list(self.student_hidden)
        return d


def _optimizer(lr: float, epochs: int) -> OptimizerConfig:
    return OptimizerConfig(learning_rate0=lr, decay_milestones=(epochs // 2, 3 * epochs // 4))


def make_splits(setup: PracticalSetup, seed: int) -> dict[str, MixedFeatureDataset]:
    vocab = random_vocabulary(setup.n_features, setup.n_classes, setup.patch_dim, seed=seed,
                              concentration=setup.concentration,
                              representation_scale=setup.representation_scale)
    tf = TransformSet.random(setup.patch_dim, setup.transform_count, setup.transform_magnitude, seed=seed)
    sizes = {"train": setup.n_train, "holdout": setup.n_holdout,
             "temperature-holdout": setup.n_temperature, "test": setup.n_test}
    return sample_splits(vocab, sizes, setup.m, tf, seed=seed)


def teacher_config(setup: PracticalSetup, mode: str, seed: int) -> TeacherTrainConfig:
    return TeacherTrainConfig(epochs=setup.teacher_epochs, batch_size=setup.batch_size,
                              optimizer=_optimizer(setup.learning_rate, setup.teacher_epochs),
                              lambda_lr=setup.lambda_lr, mode=mode, seed=seed,
                              checkpoint_every=setup.checkpoint_every,
                              cr_schedule=ScheduleSpec(setup.cr_kind, setup.cr_max, setup.teacher_epochs))


def student_config(setup: PracticalSetup, seed: int) -> DistillConfig:
    return DistillConfig(alpha=setup.alpha, temperature=setup.temperature, epochs=setup.student_epochs,
                         batch_size=setup.batch_size,
                         optimizer=_optimizer(setup.learning_rate, setup.student_epochs), seed=seed)


def build_teacher(setup: PracticalSetup, seed: int) -> Network:
    return build_network("generic-mlp", setup.m, setup.patch_dim, setup.n_classes,
                         hidden=setup.teacher_hidden, seed=seed)


def build_student(setup: PracticalSetup, seed: int) -> Network:
    # students share an initialization across teacher modes so comparisons are paired
    return build_network("generic-mlp", setup.m, setup.patch_dim, setup.n_classes,
                         hidden=setup.student_hidden, seed=seed + 1000)


def distill_and_score(setup: PracticalSetup, teacher: Network, splits, seed: int) -> dict:
    student = build_student(setup, seed)
    train_student(student, teacher, splits["train"], student_config(setup, seed))
    test = splits["test"]
    s_probs = predict_batched(student, test.patches)
    t_probs = predict_batched(teacher, test.patches)
    return {"student_acc": accuracy(s_probs, test.labels),
            "fidelity": fidelity(s_probs, t_probs).top1_agreement}


def evaluate_teacher(teacher: Network, splits) -> dict:
    hold, temp, test = splits["holdout"], splits["temperature-holdout"], splits["test"]
    _, h_logits = predict_batched(teacher, hold.patches, return_logits=True)
    _, t_logits = predict_batched(teacher, temp.patches, return_logits=True)
    cal = calibration_report(h_logits, hold.labels, t_logits, temp.labels)
    probs = predict_batched(teacher, test.patches)
    return {"teacher_nll": cal.nll_raw, "teacher_ece": cal.ece_raw,
            "teacher_nll_ts": cal.nll_scaled, "teacher_ece_ts": cal.ece_scaled,
            "temperature": cal.fitted_temperature,
            "teacher_acc": accuracy(probs, test.labels),
            "teacher_l1": float(np.abs(probs - test.true_distribution).sum(axis=1).mean()),
            "teacher_lipschitz": lipschitz_report(teacher).total}


def compare_teachers(setup: PracticalSetup, seed: int,
                     modes: tuple[str, ...] = ("standard", "soteacher")) -> dict[str, dict]:
    """Train one teacher per mode on identical data, distill a student from each, and score both."""
    splits = make_splits(setup, seed)
    out = {}
    for mode in modes:
        teacher = build_teacher(setup, seed)
        train_teacher(teacher, splits["train"], teacher_config(setup, mode, seed))
        out[mode] = {**evaluate_teacher(teacher, splits), **distill_and_score(setup, teacher, splits, seed)}
    return out


def checkpoint_sweep(setup: PracticalSetup, seed: int, mode: str,
                     splits: dict[str, MixedFeatureDataset] | None = None) -> list[dict]:
    """Distill a fresh student from every saved teacher checkpoint; one row per checkpoint."""
    splits = splits or make_splits(setup, seed)
    teacher = build_teacher(setup, seed)
    record = train_teacher(teacher, splits["train"], teacher_config(setup, mode, seed))
    rows = []
    for epoch, state in record.snapshots:
        snap = network_from_snapshot(teacher, state)
        rows.append({"mode": mode, "seed": seed, "checkpoint_epoch": epoch,
                     **distill_and_score(setup, snap, splits, seed)})
    return rows


def late_mean(rows: list[dict], fraction: float = 0.3, metric: str = "student_acc") -> float:
    """Mean of ``metric`` over the last ``fraction`` of checkpoints (at least two)."""
    k = max(2, int(round(fraction * len(rows))))
    return float(np.mean([r[metric] for r in rows[-k:]]))


def quick(setup: PracticalSetup, **changes) -> PracticalSetup:
    return replace(setup, **changes)
