"""Accuracy, calibration (ECE / NLL / temperature scaling), fidelity and
distance to the true label distribution."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import GroundTruthUnavailable, MixedFeatureDataset
from .netlib import Network, log_softmax_np, predict_batched

EPS = 1e-12
DEFAULT_BINS = 15


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def _bin_table(probs: np.ndarray, labels: np.ndarray, bins: int):
    probs = np.asarray(probs, dtype=np.float64)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == np.asarray(labels)).astype(np.float64)
    # bin b covers (b/B, (b+1)/B]; confidence 0 joins the first bin
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    return counts, conf_sum, acc_sum


def ece(probs: np.ndarray, labels: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Top-label expected calibration error with equal-width bins."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts, conf_sum, acc_sum = _bin_table(probs, labels, bins)
    n = counts.sum()
    gap = np.abs(acc_sum - conf_sum)  # n_b * |acc_b - conf_b|
    return float(gap.sum() / n)


def reliability_table(probs, labels, bins: int = DEFAULT_BINS) -> list[dict]:
    counts, conf_sum, acc_sum = _bin_table(probs, labels, bins)
    rows = []
    for b in range(bins):
        c = int(counts[b])
        rows.append({"bin": b, "lower": b / bins, "upper": (b + 1) / bins, "count": c,
                     "confidence": conf_sum[b] / c if c else 0.0,
                     "accuracy": acc_sum[b] / c if c else 0.0})
    return rows


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    picked = probs[np.arange(len(probs)), np.asarray(labels)]
    return float(np.mean(-np.log(picked + EPS)))


def _nll_at(logits: np.ndarray, labels: np.ndarray, temp: float) -> float:
    lp = log_softmax_np(logits / temp, axis=1)
    return float(-lp[np.arange(len(lp)), labels].mean())


def fit_temperature(logits: np.ndarray, labels: np.ndarray, *, lo: float = 0.05, hi: float = 10.0,
                    tol: float = 1e-4) -> float:
    """Golden-section search for the NLL-minimizing temperature on log T.

    A flat objective (every row's logits constant) returns 1.0.  The result is
    never worse than T = 1 on the data it is fitted to.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if len(logits) == 0:
        raise ValueError("temperature fitting needs a nonempty holdout set")
    if np.all(np.ptp(logits, axis=1) == 0):
        return 1.0
    f = lambda u: _nll_at(logits, labels, math.exp(u))  # noqa: E731
    a, b = math.log(lo), math.log(hi)
    inv_phi = (math.sqrt(5) - 1) / 2
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    best = math.exp((a + b) / 2)
    return best if _nll_at(logits, labels, best) <= _nll_at(logits, labels, 1.0) else 1.0


@dataclass
class CalibrationReport:
    ece_raw: float
    nll_raw: float
    fitted_temperature: float
    ece_scaled: float
    nll_scaled: float
    bin_count: int
    bins: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def calibration_report(logits: np.ndarray, labels: np.ndarray, temp_logits: np.ndarray,
                       temp_labels: np.ndarray, bins: int = DEFAULT_BINS) -> CalibrationReport:
    """ECE/NLL on (logits, labels) before and after scaling by a temperature
    fitted on the separate (temp_logits, temp_labels) holdout."""
    probs = np.exp(log_softmax_np(logits, axis=1))
    temp = fit_temperature(temp_logits, temp_labels)
    scaled = np.exp(log_softmax_np(logits / temp, axis=1))
    return CalibrationReport(ece(probs, labels, bins), nll(probs, labels), temp,
                             ece(scaled, labels, bins), nll(scaled, labels), bins,
                             reliability_table(probs, labels, bins))


@dataclass
class FidelityReport:
    top1_agreement: float
    n_examples: int

    def to_dict(self) -> dict:
        return asdict(self)


def fidelity(student_probs: np.ndarray, teacher_probs: np.ndarray) -> FidelityReport:
    """Percentage of examples whose top-1 labels agree (lowest index wins ties)."""
    s, t = np.asarray(student_probs), np.asarray(teacher_probs)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {t.shape}")
    agree = np.argmax(s, axis=1) == np.argmax(t, axis=1)
    return FidelityReport(float(100.0 * agree.mean()), int(len(agree)))


def _pnorm(diff: np.ndarray, norm) -> np.ndarray:
    if norm in (1, "1"):
        return np.abs(diff).sum(axis=1)
    if norm in (2, "2"):
        return np.sqrt((diff ** 2).sum(axis=1))
    if norm in (np.inf, "inf", "max"):
        return np.abs(diff).max(axis=1)
    raise ValueError(f"unsupported norm {norm!r}; choose 1, 2 or inf")


def distribution_error_probs(probs: np.ndarray, true_dist: np.ndarray, norm=1) -> float:
    return float(_pnorm(np.asarray(probs) - np.asarray(true_dist), norm).mean())


def distribution_error(net: Network, data: MixedFeatureDataset, norm=1) -> float:
    """Mean ||renormalized f(x) - p*(x)||_p over the dataset."""
    if data.true_distribution is None:
        raise GroundTruthUnavailable("dataset has no true label distributions")
    probs = predict_batched(net, data.patches, normalize=True)
    return distribution_error_probs(probs, data.true_distribution, norm)
