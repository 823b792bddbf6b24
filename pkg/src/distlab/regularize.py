"""Consistency regularization by temporal ensembling, and its weight schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCHEDULES = ("linear", "cosine", "cyclic", "piecewise")


@dataclass
class PredictionBuffer:
    """Running arithmetic mean of each example's past predictions."""
    mean: np.ndarray      # (N, K)
    counts: np.ndarray    # (N,)

    @classmethod
    def empty(cls, n: int, k: int) -> "PredictionBuffer":
        return cls(np.zeros((n, k)), np.zeros(n, dtype=np.int64))

    def __len__(self) -> int:
        return self.mean.shape[0]

    def update(self, example_ids, preds: np.ndarray) -> "PredictionBuffer":
        return update_buffer(self, example_ids, preds)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"buffer_mean": self.mean, "buffer_counts": self.counts}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "PredictionBuffer":
        return cls(np.array(arrays["buffer_mean"], dtype=np.float64),
                   np.array(arrays["buffer_counts"], dtype=np.int64))


def update_buffer(buffer: PredictionBuffer, example_ids, preds: np.ndarray) -> PredictionBuffer:
    ids = np.asarray(example_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(buffer)):
        raise IndexError(f"example id out of range for buffer of size {len(buffer)}")
    if len(np.unique(ids)) != ids.size:
        raise ValueError("example ids within one update must be distinct")
    t = buffer.counts[ids][:, None].astype(np.float64)
    buffer.mean[ids] = (t * buffer.mean[ids] + preds) / (t + 1.0)
    buffer.counts[ids] += 1
    return buffer


def consistency_loss(current_preds: Tensor, buffer_slice: np.ndarray, epoch: int) -> Tensor:
    """Batch mean of ||f(x) - running mean||_2^2; the buffer is a constant.

    Returns an exact zero at epoch 0, when there is no history yet.
    """
    current_preds = T.as_tensor(current_preds)
    if current_preds.shape != np.shape(buffer_slice):
        raise T.ShapeError(f"consistency_loss: predictions {current_preds.shape} vs "
                           f"buffer {np.shape(buffer_slice)}")
    if epoch == 0:
        return Tensor(0.0)
    diff = T.add(current_preds, T.Tensor(-np.asarray(buffer_slice, dtype=np.float64)))
    return T.mean(T.sum(T.square(diff), axis=1))


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "linear"
    max_weight: float = 1.0
    total_epochs: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.max_weight < 0:
            raise ValueError("max_weight must be nonnegative")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")


def cr_weight(spec: ScheduleSpec, t: float) -> float:
    """Consistency weight at epoch ``t`` in [0, T]."""
    big_t = spec.total_epochs
    if not 0 <= t <= big_t:
        raise ValueError(f"epoch {t} outside [0, {big_t}]")
    frac = t / big_t
    if spec.kind == "linear":
        w = frac
    elif spec.kind == "cosine":
        w = math.cos((1.0 - frac) * math.pi / 2.0)
    elif spec.kind == "cyclic":
        w = math.sqrt(max(0.0, 1.0 - (1.0 - frac) ** 2))
    else:
        if t <= big_t / 3:
            w = 0.0
        elif t <= 2 * big_t / 3:
            w = 0.5
        else:
            w = 1.0
    return w * spec.max_weight
