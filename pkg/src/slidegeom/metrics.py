"""Classification metrics: AUC, accuracy, macro F1, macro precision.

Binary AUC is the rank statistic with average ranks for ties, which equals
pair counting with half credit for tied pairs exactly (both are dyadic
rationals, so the equality is bitwise, not approximate). Three-class runs
report macro one-vs-rest AUC over the softmax scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def _average_ranks(values):
    """1-based ranks with ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auc(scores, labels):
    """Probability a random positive outranks a random negative (ties half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc(scores, labels, classes):
    """Binary AUC on column 1 for two classes; otherwise macro one-vs-rest."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise MetricError("AUC undefined: fewer than 2 distinct labels present")
    scores = np.asarray(scores, dtype=np.float64)
    if classes == 2:
        return binary_auc(scores[:, 1], (labels == 1).astype(int))
    per_class = []
    for c in range(classes):
        mask = (labels == c).astype(int)
        if mask.sum() == 0:
            continue  # one-vs-rest undefined for an absent class
        per_class.append(binary_auc(scores[:, c], mask))
    return float(np.mean(per_class))


def accuracy(scores, labels):
    pred = np.argmax(scores, axis=1)  # argmax breaks ties toward the lowest index
    return float(np.mean(pred == np.asarray(labels)))


def _per_class_counts(scores, labels, classes):
    pred = np.argmax(scores, axis=1)
    labels = np.asarray(labels)
    tp = np.zeros(classes)
    fp = np.zeros(classes)
    fn = np.zeros(classes)
    for c in range(classes):
        tp[c] = np.sum((pred == c) & (labels == c))
        fp[c] = np.sum((pred == c) & (labels != c))
        fn[c] = np.sum((pred != c) & (labels == c))
    return tp, fp, fn


def macro_precision(scores, labels, classes):
    tp, fp, _ = _per_class_counts(scores, labels, classes)
    denom = tp + fp
    prec = np.where(denom > 0, tp / np.where(denom > 0, denom, 1.0), 0.0)
    return float(prec.mean())


def macro_f1(scores, labels, classes):
    tp, fp, fn = _per_class_counts(scores, labels, classes)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1.0), 0.0)
    return float(f1.mean())


METRIC_NAMES = ("auc", "acc", "f1", "precision")


def compute_metrics(scores, labels, classes):
    """All four reported metrics from per-slide class scores."""
    return {
        "auc": auc(scores, labels, classes),
        "acc": accuracy(scores, labels),
        "f1": macro_f1(scores, labels, classes),
        "precision": macro_precision(scores, labels, classes),
    }


@dataclass
class EvalReport:
    """Per-fold metrics plus their mean and population std, in report order."""

    folds: list = field(default_factory=list)        # list of metric dicts
    per_slide_logits: list = field(default_factory=list)  # one {slide_id: [logits]} per fold
    flags: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def summary(self):
        out = {}
        for name in METRIC_NAMES:
            vals = np.array([f[name] for f in self.folds])
            out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def to_dict(self):
        return {
            "folds": self.folds,
            "summary": self.summary(),
            "per_slide_logits": self.per_slide_logits,
            "flags": self.flags,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }
