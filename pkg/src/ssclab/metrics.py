"""Label-based mean accuracy (mA) and instance-based set metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class AttributeCounts:
    tp: int
    fp: int
    tn: int
    fn: int
    label_accuracy: float
    degenerate: bool = False


@dataclass
class EvalReport:
    mA: float
    accu: float
    prec: float
    recall: float
    f1: float
    per_attribute: list = field(default_factory=list)
    attribute_names: list | None = None

    def to_dict(self):
        d = asdict(self)
        if self.attribute_names is None:
            d.pop("attribute_names")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def binarize(p, threshold: float = 0.5):
    """Strict cut: ``1`` iff ``p > threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(p) > threshold).astype(np.int8)


def label_mA(pred, y):
    """Per-attribute ``0.5 (TP/P + TN/N)`` averaged over attributes.

    An attribute with no positives (or no negatives) gets 0 for that side and
    is flagged degenerate rather than dropped.
    """
    pred, y = np.asarray(pred).astype(bool), np.asarray(y).astype(bool)
    tp = (pred & y).sum(axis=0)
    fp = (pred & ~y).sum(axis=0)
    tn = (~pred & ~y).sum(axis=0)
    fn = (~pred & y).sum(axis=0)
    pos, neg = tp + fn, tn + fp
    pos_acc = np.where(pos > 0, tp / np.maximum(pos, 1), 0.0)
    neg_acc = np.where(neg > 0, tn / np.maximum(neg, 1), 0.0)
    acc = 0.5 * (pos_acc + neg_acc)
    per = [AttributeCounts(int(tp[j]), int(fp[j]), int(tn[j]), int(fn[j]), float(acc[j]),
                           bool(pos[j] == 0 or neg[j] == 0)) for j in range(len(acc))]
    return float(acc.mean()), per


def instance_metrics(pred, y):
    """Mean per-sample set accuracy, precision, recall and F1 (0/0 := 0)."""
    pred, y = np.asarray(pred).astype(bool), np.asarray(y).astype(bool)
    inter = (pred & y).sum(axis=1).astype(np.float64)
    union = (pred | y).sum(axis=1)
    npred, ntrue = pred.sum(axis=1), y.sum(axis=1)

    def ratio(a, b):
        b = np.asarray(b, dtype=np.float64)
        return np.divide(a, b, out=np.zeros_like(b), where=b > 0)

    acc = ratio(inter, union)
    prec = ratio(inter, npred)
    rec = ratio(inter, ntrue)
    f1 = ratio(2 * prec * rec, prec + rec)
    return float(acc.mean()), float(prec.mean()), float(rec.mean()), float(f1.mean())


def evaluate(probs, y, threshold: float = 0.5, attribute_names=None) -> EvalReport:
    pred = binarize(probs, threshold)
    mA, per = label_mA(pred, y)
    accu, prec, rec, f1 = instance_metrics(pred, y)
    return EvalReport(mA, accu, prec, rec, f1, per, attribute_names)
