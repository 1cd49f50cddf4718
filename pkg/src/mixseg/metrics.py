"""Confusion matrix, per-class IoU and mIoU."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import IGNORE


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns prediction."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    C = cm.num_classes
    keep = truth != IGNORE
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.max() >= C or p.max() >= C or p.min() < 0):
        raise ValueError(f"class index out of range for {C} classes")
    cm.counts += np.bincount(t * C + p, minlength=C * C).reshape(C, C)
    return cm


def miou(cm: ConfusionMatrix) -> tuple[list[float], float]:
    """Per-class IoU (NaN where a class is absent from truth and prediction) and their mean."""
    diag = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - diag
    if not np.any(denom > 0):
        raise ValueError("no evaluated pixels")
    iou = np.full(cm.num_classes, np.nan)
    ok = denom > 0
    iou[ok] = diag[ok] / denom[ok]
    return iou.tolist(), float(iou[ok].mean())


def evaluate(params, samples, batch_size: int = 25) -> tuple[list[float], float, ConfusionMatrix]:
    """Score ``params`` on labeled samples; returns (per-class IoU, mIoU, confusion)."""
    from .model import predict

    cm = ConfusionMatrix(params.num_classes)
    for k in range(0, len(samples), batch_size):
        chunk = samples[k:k + batch_size]
        images = np.stack([s.image for s in chunk]).astype(params.values()[0].dtype, copy=False)
        pred = predict(params, images)
        accumulate(cm, pred, np.stack([s.label for s in chunk]))
    per_class, mean = miou(cm)
    return per_class, mean, cm


def format_table(per_class, mean: float, names) -> str:
    width = max(len(n) for n in names)
    lines = [f"{'class':<{width}}  IoU"]
    for n, v in zip(names, per_class):
        lines.append(f"{n:<{width}}  {'  n/a' if np.isnan(v) else f'{100 * v:5.2f}'}")
    lines.append(f"{'mIoU':<{width}}  {100 * mean:5.2f}")
    return "\n".join(lines)
