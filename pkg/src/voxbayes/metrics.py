"""ROC summaries: AUC by rank statistic and sensitivity at 80% specificity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

__all__ = ["ROCSummary", "roc", "roc_curve", "auc_rank", "sensitivity_at", "cutoff_at_specificity", "pooled_metrics"]


class MetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ROCSummary:
    auc: float
    s80: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def curve(self) -> list:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _check(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if len(s) != len(y):
        raise MetricError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    n1 = int(y.sum())
    if n1 == 0 or n1 == len(y):
        raise MetricError("ROC is undefined unless both classes are present")
    return s, y


def auc_rank(scores, labels) -> float:
    """Mann-Whitney AUC with tied scores counted as half concordant."""
    s, y = _check(scores, labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    # average ranks are multiples of 1/2, so U is exact in floating point
    U = rankdata(s)[y].sum() - n1 * (n1 + 1) / 2.0
    return float(U / (n1 * n0))


def roc_curve(scores, labels):
    """ROC points over every distinct threshold, from (0, 0) to (1, 1).

    Voxels are called positive when score >= threshold; tied scores move
    the curve diagonally.
    """
    s, y = _check(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    n1, n0 = tp[-1], fp[-1]
    fpr = np.r_[0.0, fp / n0]
    tpr = np.r_[0.0, tp / n1]
    thr = np.r_[np.inf, s[last]]
    return fpr, tpr, thr


def sensitivity_at(fpr, tpr, target_fpr: float = 0.2) -> float:
    """TPR at ``target_fpr`` by linear interpolation along the curve.

    Where the curve has a vertical segment at the target the largest TPR
    is used.  The match allows 1e-12 so that a target written as 1 - 0.8
    still hits an FPR of exactly 1/5.
    """
    fpr = np.asarray(fpr, dtype=float)
    tpr = np.asarray(tpr, dtype=float)
    hit = np.abs(fpr - target_fpr) <= 1e-12
    if hit.any():
        return float(tpr[hit].max())
    k = int(np.searchsorted(fpr, target_fpr, side="right"))
    x0, x1, y0, y1 = fpr[k - 1], fpr[k], tpr[k - 1], tpr[k]
    return float(y0 + (y1 - y0) * (target_fpr - x0) / (x1 - x0))


def roc(scores, labels, specificity: float = 0.8) -> ROCSummary:
    fpr, tpr, thr = roc_curve(scores, labels)
    return ROCSummary(auc_rank(scores, labels), sensitivity_at(fpr, tpr, 1.0 - specificity), fpr, tpr, thr)


def cutoff_at_specificity(scores, labels, specificity: float = 0.8) -> float:
    """Smallest threshold t with specificity >= ``specificity`` when calling score >= t positive."""
    fpr, _, thr = roc_curve(scores, labels)
    ok = np.flatnonzero(fpr <= 1.0 - specificity + 1e-12)
    return float(thr[ok[-1]])


def pooled_metrics(results, images) -> dict:
    """Pooled AUC/S80 over all voxels plus the mean of per-image AUCs."""
    lookup = {im.image_id: im for im in images}
    probs, labels, per_image = [], [], {}
    for res in results:
        lab = lookup[res.image_id].labels
        probs.append(res.probs)
        labels.append(lab)
        if 0 < lab.sum() < len(lab):
            per_image[res.image_id] = auc_rank(res.probs, lab)
    summ = roc(np.concatenate(probs), np.concatenate(labels))
    return {
        "auc": summ.auc,
        "s80": summ.s80,
        "auc_per_image_mean": float(np.mean(list(per_image.values()))) if per_image else float("nan"),
        "auc_per_image": per_image,
    }
