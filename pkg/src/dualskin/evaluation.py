"""Segmentation metrics, threshold sweeps, Top-1 rates and method reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .exceptions import InputError, ValidationError
from .validation import check_same_shape

DEFAULT_THRESHOLD = 0.5
DEFAULT_THRESHOLDS = tuple(round(t, 2) for t in np.linspace(0.0, 1.0, 21))
TASKS = ("skin", "body")


def binarize(prob, threshold=DEFAULT_THRESHOLD):
    """1 where ``prob > threshold`` (strict), else 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold {threshold} outside [0, 1]")
    return (np.asarray(prob) > threshold).astype(np.uint8)


def _counts(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    check_same_shape(pred, gt, ("pred", "gt"))
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def iou(pred, gt):
    """Intersection over union; 1.0 when both masks are empty."""
    tp, fp, fn = _counts(pred, gt)
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def precision_recall(pred, gt):
    """(precision, recall); precision is 1.0 for an empty prediction, recall 1.0 for empty gt."""
    tp, fp, fn = _counts(pred, gt)
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall


def iou_top1(table: Mapping[str, Sequence[float]]):
    """Percentage of samples on which each method attains the best IoU.

    Every method tied at the maximum of a sample is awarded the win.
    """
    methods = list(table)
    if not methods:
        raise ValidationError("empty IoU table")
    lengths = {len(table[m]) for m in methods}
    if len(lengths) != 1:
        raise ValidationError(f"ragged IoU table: column lengths {sorted(lengths)}")
    n = lengths.pop()
    if n == 0:
        raise ValidationError("IoU table has no samples")
    grid = np.array([table[m] for m in methods], dtype=np.float64)
    wins = (grid == grid.max(axis=0, keepdims=True)).sum(axis=1)
    return {m: 100.0 * float(w) / n for m, w in zip(methods, wins)}


def sweep(probs, gts, thresholds=DEFAULT_THRESHOLDS):
    """Mean IoU, precision and recall at each threshold; one row per threshold."""
    if len(probs) == 0 or len(probs) != len(gts):
        raise ValidationError("sweep needs a non-empty, matched set of maps and masks")
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValidationError("thresholds must be sorted ascending")
    rows = []
    for t in thresholds:
        stats = np.array([
            (iou(binarize(p, t), g),) + precision_recall(binarize(p, t), g)
            for p, g in zip(probs, gts)
        ])
        rows.append({
            "threshold": t,
            "mean_iou": float(stats[:, 0].mean()),
            "precision": float(stats[:, 1].mean()),
            "recall": float(stats[:, 2].mean()),
        })
    return rows


@dataclass
class TaskMetrics:
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)

    def to_dict(self):
        return {"records": self.records, "aggregates": self.aggregates, "curves": self.curves}

    @classmethod
    def from_dict(cls, d):
        return cls(d["records"], d["aggregates"], d["curves"])


def aggregate(records):
    n = len(records)
    return {
        "n": n,
        "mean_iou": float(np.mean([r["iou"] for r in records])),
        "mean_precision": float(np.mean([r["precision"] for r in records])),
        "mean_recall": float(np.mean([r["recall"] for r in records])),
    }


@dataclass
class EvalReport:
    method: str
    dataset: str
    threshold: float = DEFAULT_THRESHOLD
    thresholds: list = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    tasks: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=lambda: {"top1_tie_rule": "shared"})

    def to_dict(self):
        return {
            "method": self.method,
            "dataset": self.dataset,
            "threshold": self.threshold,
            "thresholds": list(self.thresholds),
            "tasks": {k: v.to_dict() for k, v in self.tasks.items()},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["method"], d["dataset"], d["threshold"], d["thresholds"],
            {k: TaskMetrics.from_dict(v) for k, v in d["tasks"].items()}, d["metadata"],
        )

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path):
        try:
            Path(path).write_text(self.dumps(), encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot write report {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise InputError(f"cannot read report {path}: {exc}") from exc

    def curve_csv(self, task="skin"):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "meanIoU", "precision", "recall"])
        for row in self.tasks[task].curves:
            w.writerow([row["threshold"], row["mean_iou"], row["precision"], row["recall"]])
        return buf.getvalue()


def evaluate_task(ids, probs, gts, threshold=DEFAULT_THRESHOLD, thresholds=DEFAULT_THRESHOLDS):
    records = []
    for sid, p, g in zip(ids, probs, gts):
        m = binarize(p, threshold)
        prec, rec = precision_recall(m, g)
        records.append({
            "id": sid,
            "iou": iou(m, g),
            "precision": prec,
            "recall": rec,
            "iou_curve": [iou(binarize(p, t), g) for t in thresholds],
        })
    return TaskMetrics(records, aggregate(records), sweep(probs, gts, thresholds))


def evaluate_method(predictions, samples, method="method", dataset="dataset",
                    threshold=DEFAULT_THRESHOLD, thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Score ``predictions`` (id -> {task: probability map}) on validation samples.

    A task is evaluated when the method predicts it at all; then every sample
    carrying that task's mask must have a prediction. Skin metrics use only
    samples with skin masks, body metrics only samples with body masks.
    """
    report = EvalReport(method, dataset, threshold, [float(t) for t in thresholds])
    for task in TASKS:
        if not any(task in p for p in predictions.values()):
            continue
        labelled = [s for s in samples if getattr(s, f"{task}_mask") is not None]
        missing = [s.id for s in labelled if task not in predictions.get(s.id, {})]
        if missing:
            raise ValidationError(f"missing {task} predictions for: {', '.join(missing)}")
        if not labelled:
            continue
        report.tasks[task] = evaluate_task(
            [s.id for s in labelled],
            [np.asarray(predictions[s.id][task]) for s in labelled],
            [getattr(s, f"{task}_mask") for s in labelled],
            threshold,
            thresholds,
        )
    if not report.tasks:
        raise ValidationError("no task could be evaluated (no predictions or no labelled samples)")
    return report


def compare_reports(reports: Sequence[EvalReport], task="skin"):
    """Table-style grid: one row per method with mean IoU, Top-1, precision and recall.

    Also returns a Top-1-vs-threshold table built from the per-sample IoU curves.
    """
    if not reports:
        raise ValidationError("nothing to compare")
    ids = [r["id"] for r in reports[0].tasks[task].records]
    for rep in reports[1:]:
        if [r["id"] for r in rep.tasks[task].records] != ids:
            raise ValidationError(f"report {rep.method!r} covers a different sample list")
    names = [rep.method for rep in reports]
    if len(set(names)) != len(names):
        raise ValidationError("method names must be unique")
    top1 = iou_top1({rep.method: [r["iou"] for r in rep.tasks[task].records] for rep in reports})
    grid = []
    for rep in reports:
        agg = rep.tasks[task].aggregates
        grid.append({
            "method": rep.method,
            "iou": agg["mean_iou"],
            "top1": top1[rep.method],
            "precision": agg["mean_precision"],
            "recall": agg["mean_recall"],
        })
    thresholds = reports[0].thresholds
    top1_curve = []
    for k, t in enumerate(thresholds):
        rates = iou_top1({rep.method: [r["iou_curve"][k] for r in rep.tasks[task].records] for rep in reports})
        top1_curve.append({"threshold": t, **rates})
    return grid, top1_curve


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([row[c] for c in columns])
    return buf.getvalue()
