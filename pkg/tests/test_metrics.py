import json

import numpy as np
import pytest

from diamondseg.errors import DimensionMismatch, EmptyMatrix
from diamondseg.metrics import (
    TABLE_COLUMNS, ConfusionMatrix, confusion, foi_mean_iou, iou_per_class, mean_iou, mean_pixel_accuracy,
    per_image_mean_iou, pixel_accuracy, report, report_json, rows_to_csv, table_row,
)


def brute(pred, gt):
    """Per-pixel counting with plain Python loops."""
    inter, pred_n, gt_n = [0] * 4, [0] * 4, [0] * 4
    correct = total = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        total += 1
        pred_n[p] += 1
        gt_n[g] += 1
        if p == g:
            inter[g] += 1
            correct += 1
    ious = [inter[c] / (pred_n[c] + gt_n[c] - inter[c]) if pred_n[c] + gt_n[c] - inter[c] else None for c in range(4)]
    accs = [inter[c] / gt_n[c] for c in range(4) if gt_n[c]]
    defined = [v for v in ious if v is not None]
    return correct / total, sum(accs) / len(accs), ious, sum(defined) / len(defined)


def test_matches_brute_force(rng):
    for _ in range(200):
        pred = rng.integers(0, 4, (8, 8))
        gt = rng.integers(0, rng.integers(1, 5), (8, 8))
        cm = confusion(pred, gt)
        pa, mpa, ious, miou = brute(pred, gt)
        assert pixel_accuracy(cm) == pa
        assert mean_pixel_accuracy(cm) == mpa
        assert iou_per_class(cm) == ious
        assert abs(mean_iou(cm) - miou) < 1e-12


def test_perfect_prediction():
    gt = np.array([[0, 1], [2, 3]])
    r = report(confusion(gt, gt))
    assert r.pa == r.mpa == r.miou == r.miou_foi == 1.0


def test_absent_class_is_skipped():
    gt = np.zeros((4, 4), int)
    gt[0, 0] = 2
    cm = confusion(gt, gt)
    assert iou_per_class(cm) == [1.0, None, 1.0, None]
    assert mean_iou(cm) == 1.0
    assert foi_mean_iou(cm) == 1.0


def test_accumulation_is_additive(rng):
    a = [rng.integers(0, 4, (5, 5)) for _ in range(4)]
    b = [rng.integers(0, 4, (5, 5)) for _ in range(4)]
    total = ConfusionMatrix()
    for p, g in zip(a, b):
        total = total + confusion(p, g)
    assert np.array_equal(total.counts, confusion(np.stack(a), np.stack(b)).counts)


def test_errors():
    with pytest.raises(DimensionMismatch):
        confusion(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(EmptyMatrix):
        pixel_accuracy(ConfusionMatrix())


def test_per_image_vs_aggregate_differ():
    g1 = np.zeros((2, 2), int)
    p1 = g1.copy()
    g2 = np.array([[1, 1], [1, 0]])
    p2 = np.zeros((2, 2), int)
    agg = mean_iou(confusion(np.stack([p1, p2]), np.stack([g1, g2])))
    per = per_image_mean_iou([p1, p2], [g1, g2])
    assert per != agg


def test_table_row_schema_and_csv():
    gt = np.array([[0, 1], [2, 3]])
    row = table_row("deeplabv3plus", "2x", 64, confusion(gt, gt))
    assert tuple(row) == TABLE_COLUMNS
    assert row["pocket_holder"] == "100.00"
    text = rows_to_csv([row])
    assert text.splitlines()[0].split(",") == list(TABLE_COLUMNS)
    payload = json.loads(report_json(confusion(gt, gt)))
    assert payload["confusion"] == np.eye(4, dtype=int).tolist()
