"""Classification metrics: confusion counts, rank AUC, calibration error, health score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .util import ValidationError, check_finite, require


@dataclass
class MetricsRecord:
    accuracy: float
    sensitivity: float
    specificity: float
    f1: float
    auc: float
    ece: float
    health_mean: float
    health_std: float
    high_risk_rate: float
    n: int
    tp: int
    fp: int
    tn: int
    fn: int

    def row(self):
        return [self.accuracy, self.sensitivity, self.specificity, self.f1,
                self.auc, self.ece, self.health_mean, self.health_std,
                self.high_risk_rate, self.n, self.tp, self.fp, self.tn, self.fn]

    @staticmethod
    def header():
        return ["accuracy", "sensitivity", "specificity", "f1", "auc", "ece",
                "health_mean", "health_std", "high_risk_rate", "n",
                "tp", "fp", "tn", "fn"]


def rank_auc(scores, labels) -> float:
    """AUC as the rank statistic over positive-negative pairs (ties count half)."""
    scores = check_finite(scores, "scores").ravel()
    labels = np.asarray(labels, dtype=int).ravel()
    require(scores.size == labels.size, "scores and labels must align")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC undefined for a single-class label vector")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def expected_calibration_error(probs, labels, n_bins: int = 10) -> float:
    """Equal-width-bin gap between mean confidence and observed frequency."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    bins = np.minimum((probs * n_bins).astype(int), n_bins - 1)
    ece = 0.0
    for b in range(n_bins):
        mask = bins == b
        if not np.any(mask):
            continue
        conf = probs[mask].mean()
        acc = labels[mask].mean()
        ece += mask.mean() * abs(acc - conf)
    return float(ece)


def calibration_bins(probs, labels, n_bins: int = 10):
    """Per-bin (confidence, frequency, count) rows for calibration plots."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    bins = np.minimum((probs * n_bins).astype(int), n_bins - 1)
    rows = []
    for b in range(n_bins):
        mask = bins == b
        rows.append({
            "bin": b,
            "lo": b / n_bins,
            "hi": (b + 1) / n_bins,
            "count": int(mask.sum()),
            "confidence": float(probs[mask].mean()) if np.any(mask) else float("nan"),
            "frequency": float(labels[mask].mean()) if np.any(mask) else float("nan"),
        })
    return rows


def health_scores(probs) -> np.ndarray:
    """Per-subject health score: one minus the predicted disease probability."""
    return 1.0 - np.asarray(probs, dtype=float)


def compute_metrics(probs, labels, n_bins: int = 10,
                    risk_threshold: float = 0.5) -> MetricsRecord:
    """Threshold-0.5 confusion metrics, rank AUC, binned ECE, health stats.

    The decision rule is prob >= 0.5 -> positive (ties go to the positive
    class). Probabilities must lie in [0, 1]; a single-class label vector
    makes the AUC undefined and is rejected.
    """
    probs = check_finite(probs, "probabilities").ravel()
    labels = np.asarray(labels, dtype=int).ravel()
    require(np.all((probs >= 0.0) & (probs <= 1.0)), "probabilities must lie in [0, 1]")
    require(probs.size == labels.size and probs.size >= 1, "inputs must align")

    preds = (probs >= 0.5).astype(int)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    accuracy = (tp + tn) / probs.size
    sensitivity = tp / (tp + fn) if tp + fn else 0.0
    specificity = tn / (tn + fp) if tn + fp else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = (2 * precision * sensitivity / (precision + sensitivity)
          if precision + sensitivity else 0.0)

    health = health_scores(probs)
    return MetricsRecord(
        accuracy=float(accuracy),
        sensitivity=float(sensitivity),
        specificity=float(specificity),
        f1=float(f1),
        auc=rank_auc(probs, labels),
        ece=expected_calibration_error(probs, labels, n_bins),
        health_mean=float(health.mean()),
        health_std=float(health.std()),
        high_risk_rate=float(np.mean(probs >= risk_threshold)),
        n=int(probs.size),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )
