"""Confusion-matrix accumulation and OA / UA / PA / IoU / F1.

Per-class values are one-vs-rest. A value whose denominator is zero is
undefined (``None``) and left out of the macro means.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateTargetError
from .losses import IGNORE_INDEX

METRIC_COLUMNS = ("oa", "ua", "pa", "miou", "f1")


def new_confusion(classes):
    return np.zeros((classes, classes), dtype=np.int64)


def accumulate_confusion(cm, pred, gt, ignore_index=IGNORE_INDEX):
    """Add counts[gt][pred] for every pixel whose gt is not IGNORE. Returns a new matrix."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ArgumentError(f"pred and gt sizes differ: {pred.size} vs {gt.size}")
    c = cm.shape[0]
    keep = gt != ignore_index
    pred, gt = pred[keep], gt[keep]
    if pred.size and (pred.min() < 0 or pred.max() >= c or gt.min() < 0 or gt.max() >= c):
        raise ArgumentError(f"class index outside [0, {c})")
    counts = np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
    return cm + counts


def _ratio(num, den):
    return float(num / den) if den > 0 else None


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricReport:
    oa: float
    per_class: list = field(default_factory=list)
    macro: dict = field(default_factory=dict)

    def row(self):
        return {"oa": self.oa, **{k: self.macro[k] for k in ("ua", "pa", "miou", "f1")}}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(oa=d["oa"], per_class=list(d["per_class"]), macro=dict(d["macro"]))


def derive_metrics(cm):
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise DegenerateTargetError("confusion matrix holds no pixels")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    per_class = []
    for c in range(cm.shape[0]):
        per_class.append({
            "ua": _ratio(tp[c], tp[c] + fp[c]),
            "pa": _ratio(tp[c], tp[c] + fn[c]),
            "iou": _ratio(tp[c], tp[c] + fp[c] + fn[c]),
            # 2TP/(2TP+FP+FN) equals 2*PA*UA/(PA+UA) whenever the latter is defined
            "f1": _ratio(2 * tp[c], 2 * tp[c] + fp[c] + fn[c]),
        })
    macro = {
        "ua": _mean_defined(p["ua"] for p in per_class),
        "pa": _mean_defined(p["pa"] for p in per_class),
        "miou": _mean_defined(p["iou"] for p in per_class),
        "f1": _mean_defined(p["f1"] for p in per_class),
    }
    return MetricReport(oa=float(tp.sum() / total), per_class=per_class, macro=macro)
