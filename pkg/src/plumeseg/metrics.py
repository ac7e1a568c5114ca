"""Confusion-matrix evaluation: per-class IoU/Fscore and their class means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .ioutil import canonical_dumps


def new_confusion(num_classes: int) -> np.ndarray:
    """K x K integer counts; rows are ground truth, columns are prediction."""
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def confusion_accumulate(cm: np.ndarray, prediction: np.ndarray,
                         target: np.ndarray, ignore_index: int = 255) -> np.ndarray:
    """Add per-pixel counts for one image pair into cm (in place)."""
    prediction = np.asarray(prediction)
    target = np.asarray(target)
    if prediction.shape != target.shape:
        raise ShapeError(
            f"prediction {prediction.shape} vs target {target.shape}")
    k = cm.shape[0]
    keep = target != ignore_index
    t = target[keep]
    p = prediction[keep]
    if t.size and (t.min() < 0 or t.max() >= k):
        raise DataError(f"target class index outside [0, {k})")
    if p.size and (p.min() < 0 or p.max() >= k):
        raise DataError(f"prediction class index outside [0, {k})")
    cm += np.bincount(k * t.astype(np.int64) + p, minlength=k * k).reshape(k, k)
    return cm


@dataclass
class MetricsReport:
    iou: np.ndarray        # per class, 0 for absent classes
    fscore: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    present: np.ndarray    # class appears in ground truth or prediction
    miou: float
    mfscore: float

    def to_dict(self) -> dict:
        return {
            "per_class": {
                "iou": [float(v) for v in self.iou],
                "fscore": [float(v) for v in self.fscore],
                "precision": [float(v) for v in self.precision],
                "recall": [float(v) for v in self.recall],
                "present": [bool(v) for v in self.present],
            },
            "miou": float(self.miou),
            "mfscore": float(self.mfscore),
        }

    def to_json(self) -> str:
        return canonical_dumps(self.to_dict())

    def to_table(self, class_names: list[str] | None = None) -> str:
        """Aligned plain-text table, one row per class plus the means."""
        k = len(self.iou)
        names = class_names or [f"class{i}" for i in range(k)]
        width = max(10, max(len(n) for n in names) + 2)
        lines = [f"{'Class':<{width}}{'IoU':>10}{'Fscore':>10}"
                 f"{'Precision':>12}{'Recall':>10}"]
        for i in range(k):
            if not self.present[i]:
                lines.append(f"{names[i]:<{width}}{'-':>10}{'-':>10}"
                             f"{'-':>12}{'-':>10}")
                continue
            lines.append(
                f"{names[i]:<{width}}{100 * self.iou[i]:>10.2f}"
                f"{100 * self.fscore[i]:>10.2f}"
                f"{100 * self.precision[i]:>12.2f}{100 * self.recall[i]:>10.2f}")
        lines.append(f"{'mean':<{width}}{100 * self.miou:>10.2f}"
                     f"{100 * self.mfscore:>10.2f}{'':>12}{'':>10}")
        return "\n".join(lines)


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    """Per-class IoU/Fscore/precision/recall and unweighted means.

    Classes absent from both ground truth and prediction are excluded from the
    means; a 0/0 ratio within a present class is defined as 0.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    fn = cm.sum(axis=1) - np.diag(cm)
    fp = cm.sum(axis=0) - np.diag(cm)
    present = (tp + fp + fn) > 0

    def safe(num, den):
        out = np.zeros_like(num, dtype=np.float64)
        np.divide(num, den, out=out, where=den > 0)
        return out

    iou = safe(tp, tp + fp + fn)
    precision = safe(tp, tp + fp)
    recall = safe(tp, tp + fn)
    fscore = safe(2 * precision * recall, precision + recall)
    if present.any():
        # sequential sums keep the means reproducible by a plain loop
        n_present = int(present.sum())
        miou = sum(iou[present].tolist()) / n_present
        mfscore = sum(fscore[present].tolist()) / n_present
    else:
        miou = mfscore = 0.0
    return MetricsReport(iou=iou, fscore=fscore, precision=precision,
                         recall=recall, present=present, miou=miou,
                         mfscore=mfscore)
