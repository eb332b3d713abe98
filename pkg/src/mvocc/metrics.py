"""Streaming occupancy metrics over (K+1)-class voxel label grids.

A confusion accumulator holds integer counts indexed (true, predicted);
accumulators over disjoint sample sets merge by addition, so sharded
evaluation is exact.  Class 0 is free space throughout.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError


class ConfusionAccumulator:
    """(K+1) x (K+1) integer confusion counts, rows true, columns predicted."""

    def __init__(self, n_classes: int):
        if n_classes < 2:
            raise ParameterError(f"need at least 2 classes (free + one), got {n_classes}")
        self.n_classes = int(n_classes)
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        self.n_samples = 0

    def update(self, predicted, true) -> "ConfusionAccumulator":
        predicted = np.asarray(predicted)
        true = np.asarray(true)
        if predicted.shape != true.shape:
            raise ShapeError(f"prediction {predicted.shape} and truth {true.shape} differ")
        if not (np.issubdtype(predicted.dtype, np.integer) and np.issubdtype(true.dtype, np.integer)):
            raise ShapeError("labels must be integer arrays")
        p = predicted.reshape(-1).astype(np.int64)
        t = true.reshape(-1).astype(np.int64)
        n = self.n_classes
        if p.size and (p.min() < 0 or p.max() >= n or t.min() < 0 or t.max() >= n):
            raise ParameterError(f"labels out of range for {n} classes")
        self.counts += np.bincount(t * n + p, minlength=n * n).reshape(n, n)
        self.n_samples += 1
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.n_classes != self.n_classes:
            raise ShapeError(
                f"cannot merge accumulators of {self.n_classes} and {other.n_classes} classes"
            )
        self.counts += other.counts
        self.n_samples += other.n_samples
        return self

    def reset(self) -> None:
        self.counts[:] = 0
        self.n_samples = 0


def class_iou(acc: ConfusionAccumulator, k: int):
    """Intersection over union of class k, or None when k never occurs."""
    if not 0 <= k < acc.n_classes:
        raise ParameterError(f"class {k} out of range for {acc.n_classes} classes")
    tp = int(acc.counts[k, k])
    fp = int(acc.counts[:, k].sum()) - tp
    fn = int(acc.counts[k, :].sum()) - tp
    denom = tp + fp + fn
    return None if denom == 0 else tp / denom


def per_class_iou(acc: ConfusionAccumulator):
    return [class_iou(acc, k) for k in range(acc.n_classes)]


def miou(acc: ConfusionAccumulator, include_free: bool = False):
    """Mean IoU over semantic classes, skipping classes that never occur."""
    start = 0 if include_free else 1
    vals = [v for v in per_class_iou(acc)[start:] if v is not None]
    return None if not vals else float(np.mean(vals))


def geometric_iou(acc: ConfusionAccumulator) -> float:
    """Binary occupied-versus-free IoU; 0.0 when the scene grid pair is all free."""
    occ = acc.counts[1:, 1:].sum()
    fp = acc.counts[0, 1:].sum()
    fn = acc.counts[1:, 0].sum()
    denom = int(occ + fp + fn)
    return 0.0 if denom == 0 else float(occ) / denom


def geometric_defined(acc: ConfusionAccumulator) -> bool:
    """False when neither prediction nor truth contains any occupied voxel."""
    return int(acc.counts[1:, 1:].sum() + acc.counts[0, 1:].sum() + acc.counts[1:, 0].sum()) > 0
