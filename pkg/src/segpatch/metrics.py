"""Segmentation and detection metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import IGNORE_INDEX
from .errors import EmptyDomain, EmptyScores, NoEvaluablePixels, ShapeMismatch


def _arr(x):
    if hasattr(x, "detach"):
        return x.detach().cpu().numpy()
    return np.asarray(getattr(x, "data", getattr(x, "mask", x)))


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""

    matrix: np.ndarray
    excluded: int = 0

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), 0)

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.matrix + other.matrix, self.excluded + other.excluded)


def accumulate_confusion(pred, gt, exclude=None, num_classes: int | None = None,
                         ignore_value: int | None = IGNORE_INDEX) -> ConfusionMatrix:
    """Count (gt, pred) pairs over pixels outside ``exclude`` with a non-ignored label."""
    p = _arr(pred).astype(np.int64)
    g = _arr(gt).astype(np.int64)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    drop = np.zeros(g.shape, dtype=bool)
    if exclude is not None:
        e = _arr(exclude).astype(bool)
        if e.shape != g.shape:
            raise ShapeMismatch(f"exclude mask {e.shape} vs labels {g.shape}")
        drop |= e
    if ignore_value is not None:
        drop |= g == ignore_value
    if num_classes is None:
        keep_vals = g[~drop]
        num_classes = int(max(keep_vals.max(initial=-1), p[~drop].max(initial=-1))) + 1
    keep = ~drop
    idx = g[keep] * num_classes + p[keep]
    m = np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return ConfusionMatrix(m.astype(np.int64), int(drop.sum()))


def per_class(cm: ConfusionMatrix):
    """Per-class IoU and accuracy (NaN where undefined)."""
    m = cm.matrix.astype(np.float64)
    tp = np.diag(m)
    fn = m.sum(axis=1) - tp
    fp = m.sum(axis=0) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(tp + fp + fn > 0, tp / (tp + fp + fn), np.nan)
        acc = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
    return iou, acc


def miou_macc(cm: ConfusionMatrix) -> tuple[float, float]:
    """Mean IoU over classes present in gt or prediction; mean accuracy over classes present in gt."""
    if cm.total == 0:
        raise NoEvaluablePixels("confusion matrix is empty")
    iou, acc = per_class(cm)
    return float(np.nanmean(iou)), float(np.nanmean(acc))


def class_iou(pred, gt, cls: int, exclude=None, ignore_value: int | None = IGNORE_INDEX) -> float:
    """IoU of a single class; NaN if the class is absent from both maps."""
    p, g = _arr(pred), _arr(gt)
    keep = np.ones(g.shape, dtype=bool)
    if exclude is not None:
        keep &= ~_arr(exclude).astype(bool)
    if ignore_value is not None:
        keep &= g != ignore_value
    a, b = (p == cls) & keep, (g == cls) & keep
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else float("nan")


def adversarial_effect(pred_attacked, reference, patch_mask) -> float:
    """Fraction of out-of-patch pixels where the two label maps disagree."""
    a, r = _arr(pred_attacked), _arr(reference)
    m = _arr(patch_mask).astype(bool)
    if a.shape != r.shape or m.shape != a.shape:
        raise ShapeMismatch("maps and mask must share a shape")
    dom = ~m
    n = int(dom.sum())
    if n == 0:
        raise EmptyDomain("no out-of-patch pixels")
    return float(np.count_nonzero(a[dom] != r[dom]) / n)


def mask_patch_white(image, patch_mask):
    """Copy of ``image`` (H x W x C) with the patch pixels set to 1.0."""
    if hasattr(image, "detach"):
        out = image.detach().clone()
        out[torch_mask(patch_mask)] = 1.0
        return out
    out = np.array(getattr(image, "data", image), dtype=np.float64, copy=True)
    out[_arr(patch_mask).astype(bool)] = 1.0
    return out


def torch_mask(m):
    import torch

    return m if isinstance(m, torch.Tensor) else torch.as_tensor(_arr(m).astype(bool))


def _check_scores(clean, attacked):
    c = np.asarray(clean, dtype=np.float64).ravel()
    a = np.asarray(attacked, dtype=np.float64).ravel()
    if c.size == 0 or a.size == 0:
        raise EmptyScores("both clean and attacked scores are required")
    return c, a


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(clean_scores, attacked_scores) -> RocCurve:
    """ROC of ``score >= t`` over every distinct score, AUC by the trapezoid rule.

    Tied clean/attacked scores produce a diagonal segment, so the area equals
    the midrank Mann-Whitney statistic.
    """
    c, a = _check_scores(clean_scores, attacked_scores)
    thr = np.unique(np.concatenate([c, a]))[::-1]
    tpr = np.concatenate([[0.0], [(a >= t).mean() for t in thr]])
    fpr = np.concatenate([[0.0], [(c >= t).mean() for t in thr]])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, np.concatenate([[np.inf], thr]), auc)


def mann_whitney_auc(clean_scores, attacked_scores) -> float:
    """P(attacked > clean) + 0.5 P(tie), from midranks."""
    c, a = _check_scores(clean_scores, attacked_scores)
    from scipy.stats import rankdata

    ranks = rankdata(np.concatenate([a, c]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * c.size))


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([t, f, p])


def segmentation_report(cm: ConfusionMatrix, class_names: Sequence[str] | None = None, **extra) -> dict:
    iou, acc = per_class(cm)
    names = list(class_names) if class_names else [str(i) for i in range(cm.num_classes)]
    miou, macc = miou_macc(cm)
    return {
        "mIoU": miou,
        "mAcc": macc,
        "evaluated_pixels": cm.total,
        "excluded_pixels": cm.excluded,
        "per_class": [
            {"class": n, "iou": None if np.isnan(i) else float(i), "acc": None if np.isnan(x) else float(x)}
            for n, i, x in zip(names, iou, acc)
        ],
        **extra,
    }


def write_report(stem, report: dict) -> None:
    """Write ``<stem>.json`` and ``<stem>.csv`` (per-class rows, then summary rows)."""
    stem = Path(stem)
    stem.with_suffix(".json").write_text(json.dumps(report, indent=2))
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "iou", "acc"])
        for row in report["per_class"]:
            w.writerow([row["class"], row["iou"], row["acc"]])
        for key, value in report.items():
            if key != "per_class":
                w.writerow([key, value, ""])
