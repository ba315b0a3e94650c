"""Confusion-matrix metrics: PA, MPA, per-class IoU and mIoU."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, EmptyMatrix
from .imaging import CLASS_NAMES, NUM_CLASSES

FOI_CLASSES = (1, 2, 3)


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[i, j]`` = pixels with ground truth ``i`` predicted as ``j``."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    counts = np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return ConfusionMatrix(counts.astype(np.int64))


def accumulate(matrices) -> ConfusionMatrix:
    total = ConfusionMatrix()
    for m in matrices:
        total = total + m
    return total


def _require(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix has no pixels")
    return cm.counts


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    c = _require(cm)
    return int(np.trace(c)) / int(c.sum())


def mean_pixel_accuracy(cm: ConfusionMatrix) -> float:
    """Mean of per-class recall over classes present in the ground truth."""
    c = _require(cm)
    rows = c.sum(axis=1)
    accs = [int(c[i, i]) / int(rows[i]) for i in range(len(rows)) if rows[i] > 0]
    return sum(accs) / len(accs)


def iou_per_class(cm: ConfusionMatrix) -> list[Optional[float]]:
    """``IoU_i = diag / (row + col - diag)``; ``None`` when the class never occurs."""
    c = _require(cm)
    rows, cols = c.sum(axis=1), c.sum(axis=0)
    out: list[Optional[float]] = []
    for i in range(len(rows)):
        denom = int(rows[i] + cols[i] - c[i, i])
        out.append(int(c[i, i]) / denom if denom > 0 else None)
    return out


def mean_iou(cm: ConfusionMatrix, classes=None) -> float:
    """Mean IoU over defined classes (optionally restricted to ``classes``)."""
    ious = iou_per_class(cm)
    keep = range(len(ious)) if classes is None else classes
    vals = [ious[i] for i in keep if ious[i] is not None]
    return sum(vals) / len(vals) if vals else 0.0


def foi_mean_iou(cm: ConfusionMatrix) -> float:
    """Mean IoU over the three FOI classes only (background excluded)."""
    return mean_iou(cm, FOI_CLASSES)


@dataclass
class MetricsReport:
    pa: float
    mpa: float
    iou: list[Optional[float]]
    miou: float
    miou_foi: float
    evaluated_classes: list[int]

    def to_dict(self) -> dict:
        return {
            "pa": self.pa,
            "mpa": self.mpa,
            "iou": {CLASS_NAMES[i]: v for i, v in enumerate(self.iou)},
            "miou": self.miou,
            "miou_foi": self.miou_foi,
            "evaluated_classes": self.evaluated_classes,
        }


def report(cm: ConfusionMatrix) -> MetricsReport:
    ious = iou_per_class(cm)
    return MetricsReport(
        pa=pixel_accuracy(cm),
        mpa=mean_pixel_accuracy(cm),
        iou=ious,
        miou=mean_iou(cm),
        miou_foi=foi_mean_iou(cm),
        evaluated_classes=[i for i, v in enumerate(ious) if v is not None],
    )


def per_image_report(pred: np.ndarray, gt: np.ndarray) -> MetricsReport:
    return report(confusion(pred, gt))


def per_image_mean_iou(preds, gts) -> float:
    """Average of per-image mIoU values (distinct from the aggregate-matrix mIoU)."""
    scores = [mean_iou(confusion(p, g)) for p, g in zip(preds, gts)]
    if not scores:
        raise EmptyMatrix("no images")
    return sum(scores) / len(scores)


# ------------------------------------------------------------------ output

TABLE_COLUMNS = (
    "model", "dataset", "resolution", "pocket_holder", "diamond_top", "diamond_side",
    "background", "miou", "miou_foi", "pa", "mpa",
)


def table_row(model: str, dataset: str, resolution: int, cm: ConfusionMatrix) -> dict:
    r = report(cm)

    def pct(v):
        return "" if v is None else f"{100.0 * v:.2f}"

    return {
        "model": model,
        "dataset": dataset,
        "resolution": resolution,
        "pocket_holder": pct(r.iou[1]),
        "diamond_top": pct(r.iou[2]),
        "diamond_side": pct(r.iou[3]),
        "background": pct(r.iou[0]),
        "miou": pct(r.miou),
        "miou_foi": pct(r.miou_foi),
        "pa": pct(r.pa),
        "mpa": pct(r.mpa),
    }


def rows_to_csv(rows: list[dict], columns=TABLE_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def report_json(cm: ConfusionMatrix, **extra) -> str:
    payload = report(cm).to_dict()
    payload["confusion"] = cm.counts.tolist()
    payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
