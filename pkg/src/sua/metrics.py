"""Distribution and segmentation metrics.

Histogram metrics follow the normalised-histogram definitions

    Corr(H1, H2)   = sum (H1 - mean H1)(H2 - mean H2) / sqrt(sum (H1 - mean H1)^2 sum (H2 - mean H2)^2)
    D_Bhat(H1, H2) = sqrt(1 - sum sqrt(H1 H2) / sqrt(mean H1 * mean H2 * N^2))

Segmentation metrics are one-vs-rest per class and averaged over the
foreground classes (1..C-1) present in the prediction or the ground truth.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ParameterError, ShapeError, check_mask

TABLE_KEYS = ("D_Bhat", "Corr", "Acc", "Dice", "mIoU", "Sen", "Spe", "FDR")


def histogram(img, bins=256, mask=None):
    """Normalised intensity histogram over [0, 1] with ``bins`` uniform bins.

    The last bin is closed on the right. ``mask`` restricts the pixels counted.
    """
    if bins < 2:
        raise ParameterError("need at least 2 bins")
    vals = np.asarray(img, dtype=np.float64)
    if mask is not None:
        vals = vals[np.asarray(mask, dtype=bool)]
    vals = vals.ravel()
    if vals.size == 0:
        raise ParameterError("no pixels to histogram")
    idx = np.clip(np.floor(vals * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    return counts / vals.size


def _pair(h1, h2):
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape or h1.ndim != 1:
        raise ParameterError(f"histograms must have equal bin counts, got {h1.shape} and {h2.shape}")
    return h1, h2


def bhattacharyya(h1, h2):
    h1, h2 = _pair(h1, h2)
    n = h1.size
    norm = math.sqrt(h1.mean() * h2.mean() * n * n)
    if norm == 0:
        raise ParameterError("empty histogram")
    inner = 1.0 - float(np.sum(np.sqrt(h1 * h2))) / norm
    return math.sqrt(min(max(inner, 0.0), 1.0))


def correlation(h1, h2):
    """Pearson correlation of bin masses; NaN when either histogram is flat."""
    h1, h2 = _pair(h1, h2)
    d1 = h1 - h1.mean()
    d2 = h2 - h2.mean()
    den = math.sqrt(float(np.sum(d1 * d1)) * float(np.sum(d2 * d2)))
    if den == 0.0:
        return math.nan
    return float(np.sum(d1 * d2)) / den


def confusion(pred, gt, cls):
    p = pred == cls
    g = gt == cls
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


def _ratio(num, den, empty):
    return num / den if den else empty


def class_scores(tp, fp, fn, tn):
    """Per-class scores; an empty denominator yields the ideal value."""
    return {
        "Dice": _ratio(2 * tp, 2 * tp + fp + fn, 1.0),
        "IoU": _ratio(tp, tp + fp + fn, 1.0),
        "Sen": _ratio(tp, tp + fn, 1.0),
        "Spe": _ratio(tn, tn + fp, 1.0),
        "FDR": _ratio(fp, tp + fp, 0.0),
        "Acc": (tp + tn) / (tp + fp + fn + tn),
    }


@dataclass
class MetricReport:
    D_Bhat: float = math.nan
    Corr: float = math.nan
    Acc: float = math.nan
    Dice: float = math.nan
    mIoU: float = math.nan
    Sen: float = math.nan
    Spe: float = math.nan
    FDR: float = math.nan
    per_class: dict = field(default_factory=dict)

    def table(self):
        return {k: _json_float(getattr(self, k)) for k in TABLE_KEYS}

    def to_json(self):
        """JSON with exactly the table columns; undefined values become null."""
        return json.dumps(self.table(), indent=2)


def _json_float(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def segmentation_metrics(pred, gt, n_classes=None):
    """Acc, Dice, mIoU, Sen, Spe, FDR averaged over foreground classes.

    Classes absent from both ``pred`` and ``gt`` are left out of the means.
    """
    pred = check_mask(pred, name="prediction")
    gt = check_mask(gt, name="ground truth")
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if n_classes is None:
        n_classes = max(int(pred.max()), int(gt.max()), 1) + 1
    if pred.max() >= n_classes or gt.max() >= n_classes:
        raise ParameterError("labels exceed the class count")
    per_class = {}
    for cls in range(1, n_classes):
        tp, fp, fn, tn = confusion(pred, gt, cls)
        if tp + fp + fn == 0:
            continue
        per_class[cls] = class_scores(tp, fp, fn, tn)
    report = MetricReport(per_class=per_class)
    if per_class:
        for key, name in (("Acc", "Acc"), ("Dice", "Dice"), ("IoU", "mIoU"), ("Sen", "Sen"),
                          ("Spe", "Spe"), ("FDR", "FDR")):
            setattr(report, name, float(np.mean([s[key] for s in per_class.values()])))
    return report


def distribution_metrics(images, reference_hist, bins=256):
    """Mean D_Bhat and Corr of each image's histogram against ``reference_hist``."""
    dists, corrs = [], []
    for img in images:
        h = histogram(img, bins)
        dists.append(bhattacharyya(h, reference_hist))
        corrs.append(correlation(h, reference_hist))
    corr = np.array(corrs)
    mean_corr = float(np.mean(corr[~np.isnan(corr)])) if np.any(~np.isnan(corr)) else math.nan
    return float(np.mean(dists)), mean_corr


def mean_histogram(images, bins=256):
    return np.mean([histogram(img, bins) for img in images], axis=0)
