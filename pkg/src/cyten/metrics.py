"""Confusion metrics, ROC/AUC, and subject-level majority voting.

A prediction is positive iff score >= threshold. Ratios with a zero
denominator are reported as None (absent), never silently as 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ValidationError

REPORT_THRESHOLDS = (0.40, 0.50, 0.60)


@dataclass
class EvalReport:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float | None
    recall: float | None
    specificity: float | None
    sensitivity: float | None
    f1: float | None
    auc: float | None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class RocCurve:
    """Threshold-sweep operating points, anchored at (0,0) and (1,1)."""

    fpr: list = field(default_factory=list)
    tpr: list = field(default_factory=list)

    def points(self):
        return list(zip(self.fpr, self.tpr))


def _check_labels(labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValidationError("empty input", "need at least one label")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("bad label", "labels must be 0 or 1")
    return labels.astype(np.int64)


def confusion_metrics(scores, labels, threshold):
    """EvalReport at one decision threshold (positive iff score >= threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels)
    if scores.shape != labels.shape:
        raise ValidationError("shape mismatch", f"scores {list(scores.shape)} vs labels {list(labels.shape)}")
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))

    def ratio(num, den):
        return num / den if den > 0 else None

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    specificity = ratio(tn, tn + fp)
    f1 = None
    if precision is not None and recall is not None and (precision + recall) > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    auc = None
    if pos.any() and (~pos).any():
        _, auc = roc_auc(scores, labels)
    return EvalReport(threshold=float(threshold), tp=tp, fp=fp, tn=tn, fn=fn,
                      accuracy=(tp + tn) / labels.size, precision=precision,
                      recall=recall, specificity=specificity, sensitivity=recall,
                      f1=f1, auc=auc)


def roc_auc(scores, labels):
    """ROC staircase over the unique-score threshold sweep plus trapezoidal AUC.

    Equal scores collapse into single sweep points, so the trapezoid
    equals pairwise concordance with ties counted 0.5.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels)
    if scores.shape != labels.shape:
        raise ValidationError("shape mismatch", f"scores {list(scores.shape)} vs labels {list(labels.shape)}")
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC undefined", "roc_auc needs both classes present")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    boundary = np.nonzero(np.diff(s))[0]  # last index of each tied group
    idx = np.concatenate([boundary, [s.size - 1]])
    cum_tp = np.cumsum(y == 1)[idx]
    cum_fp = np.cumsum(y == 0)[idx]
    fpr = np.concatenate([[0.0], cum_fp / n_neg])
    tpr = np.concatenate([[0.0], cum_tp / n_pos])
    auc = float(np.trapz(tpr, fpr))
    return RocCurve(fpr=fpr.tolist(), tpr=tpr.tolist()), auc


def aggregate_subject(unit_scores, threshold):
    """Majority vote of thresholded unit scores per subject; ties vote positive.

    unit_scores: mapping subject -> list of unit probabilities.
    Returns mapping subject -> 0/1.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError("bad threshold", f"vote threshold must be in (0,1), got {threshold}")
    out = {}
    for subject, units in unit_scores.items():
        units = list(units)
        if not units:
            raise ValidationError("empty subject group", f"subject {subject!r} has no scored units")
        positives = sum(1 for u in units if u >= threshold)
        negatives = len(units) - positives
        out[subject] = 1 if positives >= negatives else 0
    return out


def vote_sweep(unit_scores, thresholds=REPORT_THRESHOLDS):
    """aggregate_subject at each threshold; the standard report set is
    {0.40, 0.50, 0.60}."""
    return {float(t): aggregate_subject(unit_scores, t) for t in thresholds}
