"""Executable checks of the feature-level theory on synthetic mixed-feature data.

Everything here consumes the generator's hidden ground truth (feature names and
exact label distributions), so the quantities compared are exact rather than
estimated.  Feature-level sample means weight every patch occurrence equally: an
input that draws the same feature twice contributes its label twice, which is
what the regrouped empirical risk of a modified-softmax model does.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .datagen import (FeatureVocabulary, GroundTruthUnavailable, MixedFeatureDataset, TransformSet,
                      manifold_vocabulary, random_vocabulary, sample_dataset, sample_splits)
from .evalcal import distribution_error
from .netlib import build_network, extractor_lipschitz, lipschitz_report
from .regularize import ScheduleSpec
from .rng import substream
from .tensor import OptimizerConfig, Parameter


class Lemma1Diverged(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


class SweepFailed(RuntimeError):
    def __init__(self, message: str, partial: "ScalingCurve"):
        super().__init__(message)
        self.partial = partial


# --- feature statistics -------------------------------------------------------

@dataclass
class FeatureStats:
    counts: np.ndarray        # N_z: number of inputs containing z
    occurrences: np.ndarray   # C_z: number of patches carrying z
    ybar: np.ndarray          # (|Z|, K) label sample means; NaN rows for absent features
    pbar: np.ndarray          # (|Z|, K) mean true label distribution over the same occurrences
    p_true: np.ndarray        # (|Z|, K) vocabulary label distributions
    risk: float               # regrouped empirical risk attained by ybar

    @property
    def present(self) -> np.ndarray:
        return self.occurrences > 0


def _require_ground_truth(data: MixedFeatureDataset) -> None:
    if data.feature_names is None or data.vocabulary is None or data.true_distribution is None:
        raise GroundTruthUnavailable("dataset carries no ground-truth feature names")


def occurrence_matrix(data: MixedFeatureDataset) -> np.ndarray:
    """(N, |Z|) matrix of how many patches of input i carry feature z."""
    _require_ground_truth(data)
    n, size = len(data), data.vocabulary.size
    occ = np.zeros((n, size))
    np.add.at(occ, (np.repeat(np.arange(n), data.n_patches), data.feature_names.ravel()), 1.0)
    return occ


def regrouped_risk(data: MixedFeatureDataset, table: np.ndarray) -> float:
    """Empirical cross-entropy of a per-feature prediction table under the modified softmax head:
    -(1 / (N M)) sum_i sum_m log table[z_m(i), y_i].  Only features present in the data matter."""
    _require_ground_truth(data)
    picked = np.asarray(table)[data.feature_names, data.labels[:, None]]
    with np.errstate(divide="ignore"):
        return float(-np.log(picked).mean())


def feature_stats(data: MixedFeatureDataset) -> FeatureStats:
    occ = occurrence_matrix(data)
    k = data.n_classes
    onehot = np.eye(k)[data.labels]
    c = occ.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ybar = (occ.T @ onehot) / c[:, None]
        pbar = (occ.T @ data.true_distribution) / c[:, None]
    ybar[c == 0] = np.nan
    pbar[c == 0] = np.nan
    counts = (occ > 0).sum(axis=0).astype(np.int64)
    table = np.where(c[:, None] > 0, ybar, 1.0)
    return FeatureStats(counts, c.astype(np.int64), ybar, pbar, data.vocabulary.label_matrix,
                        regrouped_risk(data, table))


def feature_minimizer(data: MixedFeatureDataset) -> tuple[dict[int, np.ndarray], float]:
    """Closed-form per-feature minimizer p_z = ybar_z of the regrouped risk, and the risk it attains.

    Features that never occur have no defined minimizer and are left out.
    """
    stats = feature_stats(data)
    return {int(z): stats.ybar[z].copy() for z in np.flatnonzero(stats.present)}, stats.risk


# --- Lemma 1: a literal invariant extractor reaches the closed form ----------------

@dataclass
class Lemma1Result:
    gap: float                    # max_z ||p_trained(z) - ybar_z||_inf over present features
    trained: np.ndarray           # (|Z|, K) per-feature predictions of the trained model
    closed_form: np.ndarray       # (|Z|, K) ybar
    loss_trace: list[float]
    gap_trace: list[float]

    def to_dict(self) -> dict:
        return {"gap": self.gap, "final_loss": self.loss_trace[-1], "steps": len(self.loss_trace)}


def verify_lemma1(data: MixedFeatureDataset, steps: int = 5000, lr: float = 1.0, *,
                  momentum: float = 0.9, feature_dim: int | None = None, seed: int = 0,
                  patience: int = 10) -> Lemma1Result:
    """Train a lookup-table extractor (one free vector per feature), a shared classifier and a
    modified-softmax head by full-batch momentum SGD on the empirical cross-entropy, then compare
    the per-feature predictions with the label sample means.

    The loss is evaluated example by example exactly as in training a patchwise model; the
    lookup is a one-hot matrix product so gradients flow through the ordinary tape.
    Raises Lemma1Diverged if the loss rises ``patience`` steps in a row.
    """
    _require_ground_truth(data)
    stats = feature_stats(data)
    size, k, m = data.vocabulary.size, data.n_classes, data.n_patches
    d = feature_dim or max(k, 2)
    rng = substream(seed, "init")
    limit = math.sqrt(6.0 / (size + d))
    table = Parameter.from_array("lookup", rng.uniform(-limit, limit, size=(size, d)))
    limit = math.sqrt(6.0 / (d + k))
    head = Parameter.from_array("classifier", rng.uniform(-limit, limit, size=(k, d)))
    params = [table, head]
    select = np.eye(size)[data.feature_names.ravel()]          # (N M, |Z|)
    onehot = np.eye(k)[data.labels]
    n = len(data)
    cfg = OptimizerConfig(learning_rate0=lr, momentum=momentum, weight_decay=0.0)
    present = stats.present

    def graph(sel):
        h = T.matmul(sel, table.tensor)                       # invariant features h_m
        patch_logits = T.matmul(h, T.transpose(head.tensor))
        logf = T.mean(T.reshape(T.log_softmax(patch_logits, axis=-1), (n, m, k)), axis=1)
        return T.neg(T.mean(T.sum(T.mul(onehot, logf), axis=1)))

    def per_feature() -> np.ndarray:
        logits = table.data @ head.data.T
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    losses, gaps, rises = [], [], 0
    for _ in range(steps):
        loss, grads = T.forward_backward(graph, [select], params)
        if losses and loss > losses[-1] + 1e-12 * abs(losses[-1]):
            rises += 1
            if rises >= patience:
                raise Lemma1Diverged(f"loss increased {patience} consecutive steps", losses + [loss])
        else:
            rises = 0
        losses.append(loss)
        T.sgd_step(params, grads, lr, cfg)
        gaps.append(float(np.abs(per_feature()[present] - stats.ybar[present]).max()))
    trained = per_feature()
    gap = float(np.abs(trained[present] - stats.ybar[present]).max())
    return Lemma1Result(gap, trained, stats.ybar, losses, gaps)


# --- Lemma 2: label sample means concentrate around mean true distributions -------

def lemma2_deviation(stats: FeatureStats, norm=2) -> np.ndarray:
    """Per-feature ||ybar_z - pbar_z|| (NaN for absent features)."""
    diff = stats.ybar - stats.pbar
    if norm in (1, "1"):
        return np.abs(diff).sum(axis=1)
    if norm in (2, "2"):
        return np.sqrt((diff ** 2).sum(axis=1))
    if norm in (np.inf, "inf", "max"):
        return np.abs(diff).max(axis=1)
    raise ValueError(f"unsupported norm {norm!r}")


def chebyshev_envelope(data: MixedFeatureDataset, delta: float) -> np.ndarray:
    """Per-feature radius r_z with P(||ybar_z - pbar_z||_2 >= r_z) <= delta.

    The summed label deviation of feature z has second moment at most
    sum_i w_iz^2 (K - 1)/K <= (K - 1) sum_i w_iz^2, where w_iz is the number of
    patches of input i carrying z; dividing by C_z gives the radius.  With one
    occurrence per input this is sqrt((K - 1) / (N_z delta)).
    """
    occ = occurrence_matrix(data)
    c = occ.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.sqrt((data.n_classes - 1) * (occ ** 2).sum(axis=0) / delta) / c


@dataclass
class Lemma2Result:
    n_grid: list[int]
    errors: np.ndarray            # (seeds, grid) mean deviation over present features
    mean_error: list[float]
    slope: float

    def to_dict(self) -> dict:
        return {"n_grid": self.n_grid, "mean_error": self.mean_error, "slope": self.slope,
                "errors": self.errors.tolist()}


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)), 1)[0])


def verify_lemma2(vocab: FeatureVocabulary, n_grid: Sequence[int], m: int, seeds: Sequence[int],
                  norm=2) -> Lemma2Result:
    """Mean over features of ||ybar_z - pbar_z|| for each N, and the fitted log-log slope."""
    n_grid = [int(v) for v in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("N grid must be strictly increasing")
    errors = np.zeros((len(seeds), len(n_grid)))
    for i, seed in enumerate(seeds):
        for j, n in enumerate(n_grid):
            stats = feature_stats(sample_dataset(vocab, n, m, seed=seed))
            errors[i, j] = float(np.nanmean(lemma2_deviation(stats, norm)))
    mean = errors.mean(axis=0)
    return Lemma2Result(n_grid, errors, mean.tolist(), loglog_slope(n_grid, mean))


# --- Lemma 3: mixing bias of the per-feature mean distribution ----------------------

@dataclass
class Lemma3Result:
    gaps: np.ndarray       # per-feature ||pbar_z - p_Y(.|z)||_1, NaN when absent
    mean_gap: float
    m_over_z: float

    def to_dict(self) -> dict:
        return {"mean_gap": self.mean_gap, "m_over_z": self.m_over_z,
                "gaps": [None if np.isnan(g) else float(g) for g in self.gaps]}


def verify_lemma3(vocab: FeatureVocabulary, data: MixedFeatureDataset) -> Lemma3Result:
    """Exact per-feature L1 gap between the mean true distribution of inputs containing z
    and the feature's own label distribution."""
    if data.vocabulary is not vocab and data.vocabulary.size != vocab.size:
        raise ValueError("dataset was not drawn from this vocabulary")
    stats = feature_stats(data)
    gaps = np.abs(stats.pbar - vocab.label_matrix).sum(axis=1)
    return Lemma3Result(gaps, float(np.nanmean(gaps)), data.n_patches / vocab.size)


def lemma3_sweep(build_vocab: Callable[[int, int], FeatureVocabulary], z_grid: Sequence[int],
                 n: int, m: int, seeds: Sequence[int]) -> np.ndarray:
    """(seeds, grid) mean Lemma-3 gaps; ``build_vocab(size, seed)`` makes each vocabulary."""
    out = np.zeros((len(seeds), len(z_grid)))
    for i, seed in enumerate(seeds):
        for j, size in enumerate(z_grid):
            vocab = build_vocab(int(size), seed)
            out[i, j] = verify_lemma3(vocab, sample_dataset(vocab, n, m, seed=seed)).mean_gap
    return out


# --- bound surrogates -----------------------------------------------------------------

@dataclass(frozen=True)
class BoundInputs:
    n_classes: int
    n: int
    m: int
    n_features: int
    delta: float = 0.1
    lipschitz_x: float = 0.0
    lipschitz_gamma: float = 0.0
    nu: float = 0.0

    def __post_init__(self):
        if min(self.n_classes, self.n, self.m, self.n_features) < 1:
            raise ValueError("K, N, M and |Z| must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if min(self.lipschitz_x, self.lipschitz_gamma, self.nu) < 0:
            raise ValueError("L_X, L_Gamma and nu must be nonnegative")


@dataclass(frozen=True)
class BoundTerms:
    """Constant-free scaling surrogates for the approximation-error bound."""
    sampling: float
    mixing: float
    continuity: float
    robustness: float

    @property
    def total(self) -> float:
        return self.sampling + self.mixing + self.continuity + self.robustness

    def to_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


def bound_terms(inputs: BoundInputs) -> BoundTerms:
    b = inputs
    return BoundTerms(
        sampling=math.sqrt(b.n_classes * b.m / (b.n * b.n_features * b.delta)),
        mixing=b.m / b.n_features,
        continuity=b.lipschitz_x * b.nu / math.sqrt(b.delta),
        robustness=b.lipschitz_gamma,
    )


# --- theorem sweeps -------------------------------------------------------------------

SWEEPABLE = ("n_train", "n_features", "transform_magnitude", "representation_scale",
             "lambda_lr", "cr_max")


@dataclass(frozen=True)
class SweepSetup:
    """Everything needed to train one patchwise teacher and score it against p*."""
    vocab_kind: str = "manifold"          # manifold | random
    n_features: int = 16
    n_classes: int = 3
    patch_dim: int = 8
    m: int = 4
    sharpness: float = 3.0
    neighbors: int = 2
    concentration: float = 0.5
    representation_scale: float = 0.1
    mean_spread: float = 1.0
    n_train: int = 2000
    n_test: int = 2000
    transform_magnitude: float = 0.0
    transform_count: int = 8
    hidden: tuple[int, ...] = (32,)
    feature_dim: int = 16
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    weight_decay: float = 5e-4
    decay_at: tuple[float, ...] = (0.5, 0.75)   # milestones as fractions of the epoch budget
    mode: str = "standard"
    lambda_lr: float = 1e-5
    cr_max: float = 1.0
    cr_kind: str = "linear"
    delta: float = 0.1

    def with_value(self, name: str, value) -> "SweepSetup":
        if name not in SWEEPABLE:
            raise ValueError(f"cannot sweep {name!r}; choose from {SWEEPABLE}")
        cast = int if name in ("n_train", "n_features") else float
        return SweepSetup(**{**asdict(self), name: cast(value)})

    def vocabulary(self, seed: int) -> FeatureVocabulary:
        if self.vocab_kind == "manifold":
            return manifold_vocabulary(self.n_features, self.n_classes, self.patch_dim, seed=seed,
                                       sharpness=self.sharpness, neighbors=self.neighbors,
                                       mean_spread=self.mean_spread,
                                       representation_scale=self.representation_scale)
        if self.vocab_kind == "random":
            return random_vocabulary(self.n_features, self.n_classes, self.patch_dim, seed=seed,
                                     concentration=self.concentration, mean_spread=self.mean_spread,
                                     representation_scale=self.representation_scale)
        raise ValueError(f"unknown vocabulary kind {self.vocab_kind!r}")


def run_point(setup: SweepSetup, seed: int) -> dict:
    """Train one patchwise teacher under ``setup`` and report its distance to p* on fresh data."""
    from .trainlab import TeacherTrainConfig, train_teacher

    vocab = setup.vocabulary(seed)
    tf = TransformSet.random(setup.patch_dim, setup.transform_count, setup.transform_magnitude, seed=seed)
    splits = sample_splits(vocab, {"train": setup.n_train, "test": setup.n_test}, setup.m, tf, seed=seed)
    net = build_network("patchwise", setup.m, setup.patch_dim, setup.n_classes, hidden=setup.hidden,
                        feature_dim=setup.feature_dim, seed=seed)
    milestones = sorted({int(round(f * setup.epochs)) for f in setup.decay_at} - {0})
    opt = OptimizerConfig(learning_rate0=setup.learning_rate, weight_decay=setup.weight_decay,
                          decay_milestones=tuple(milestones))
    cfg = TeacherTrainConfig(epochs=setup.epochs, batch_size=setup.batch_size, optimizer=opt,
                             lambda_lr=setup.lambda_lr, mode=setup.mode, seed=seed,
                             cr_schedule=ScheduleSpec(setup.cr_kind, setup.cr_max, setup.epochs),
                             checkpoint_every=setup.epochs)
    record = train_teacher(net, splits["train"], cfg)
    l_x = extractor_lipschitz(net)
    terms = bound_terms(BoundInputs(setup.n_classes, setup.n_train, setup.m, setup.n_features,
                                    setup.delta, l_x, l_x * tf.magnitude_bound(vocab),
                                    max(setup.representation_scale ** 2, 0.0)))
    return {"seed": seed, "distribution_error": distribution_error(net, splits["test"], 1),
            "lipschitz_penalty": lipschitz_report(net).total, "extractor_lipschitz": l_x,
            "train_acc": record.final["train_acc"], **{f"term_{k}": v for k, v in terms.to_dict().items()}}


@dataclass
class ScalingCurve:
    parameter: str
    grid: list[float]
    seeds: list[int]
    rows: list[dict] = field(default_factory=list)    # one per (grid value, seed)
    label: str = "scaling surrogate"

    def matrix(self, metric: str = "distribution_error") -> np.ndarray:
        """(seeds, grid) array of a metric; NaN where a run is missing."""
        out = np.full((len(self.seeds), len(self.grid)), np.nan)
        for r in self.rows:
            out[self.seeds.index(r["seed"]), self.grid.index(r["value"])] = r[metric]
        return out

    @property
    def mean_error(self) -> list[float]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # grid values with no finished run
            return np.nanmean(self.matrix(), axis=0).tolist()

    def nonincreasing_fraction(self, metric: str = "distribution_error", inversions: int = 0) -> float:
        """Fraction of seeds whose curve never increases (allowing ``inversions`` rises)."""
        mat = self.matrix(metric)
        ok = (np.diff(mat, axis=1) > 0).sum(axis=1) <= inversions
        return float(ok.mean())

    def slope(self) -> float | None:
        grid = np.asarray(self.grid, dtype=float)
        mean = np.asarray(self.mean_error)
        keep = (grid > 0) & np.isfinite(mean) & (mean > 0)
        return loglog_slope(grid[keep], mean[keep]) if keep.sum() >= 2 else None

    def to_csv(self, path) -> None:
        cols = ["parameter", "value", *sorted({k for r in self.rows for k in r} - {"value"})]
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({"parameter": self.parameter, **r})

    def summary(self) -> dict:
        return {"parameter": self.parameter, "grid": self.grid, "seeds": self.seeds,
                "mean_distribution_error": self.mean_error, "fitted_loglog_slope": self.slope(),
                "nonincreasing_fraction": self.nonincreasing_fraction(), "label": self.label}

    def write(self, out_dir, name: str = "scaling") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.to_csv(out / f"{name}.csv")
        (out / f"{name}.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))


def theorem_sweep(parameter: str, grid: Sequence[float], seeds: Sequence[int],
                  setup: SweepSetup = SweepSetup(), *, out_dir=None, jobs: int = 1,
                  runner: Callable[[SweepSetup, int], dict] = run_point) -> ScalingCurve:
    """Train a teacher at every (grid value, seed) and collect the measured errors.

    Sub-runs are independent; ``jobs > 1`` fans them out over processes.  If any
    sub-run fails, the finished rows are written (when ``out_dir`` is set) and
    SweepFailed carrying the partial curve is raised.
    """
    grid = [float(v) for v in grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("sweep grid must be strictly increasing")
    curve = ScalingCurve(parameter, grid, [int(s) for s in seeds])
    tasks = [(value, setup.with_value(parameter, value), int(seed)) for value in grid for seed in seeds]
    failure = None
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(v, pool.submit(runner, s, seed)) for v, s, seed in tasks]
            for value, fut in futures:
                try:
                    curve.rows.append({"value": value, **fut.result()})
                except Exception as exc:  # noqa: BLE001 - recorded and re-raised below
                    failure = failure or exc
    else:
        for value, sub, seed in tasks:
            try:
                curve.rows.append({"value": value, **runner(sub, seed)})
            except Exception as exc:  # noqa: BLE001
                failure = exc
                break
    if out_dir is not None:
        curve.write(out_dir)
    if failure is not None:
        raise SweepFailed(f"sub-run failed: {failure}", curve) from failure
    return curve
