"""Evaluation metrics: pair-counting ROC AUC with half credit for ties,
macro one-vs-rest AUC, balanced accuracy, and the report container.

Metrics that are undefined on a given sample set (a class entirely absent)
come back as None, never as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC of binary labels; tied pairs count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_ovr_auc(probs: np.ndarray, labels: np.ndarray) -> float | None:
    """Mean one-vs-rest AUC over the classes of the probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    aucs = []
    for c in range(probs.shape[1]):
        auc = roc_auc(probs[:, c], labels == c)
        if auc is None:
            return None
        aucs.append(auc)
    return float(np.mean(aucs))


def task_auc(probs: np.ndarray, labels: np.ndarray) -> float | None:
    """Binary tasks score class 1; multiclass falls back to macro OvR."""
    if probs.shape[1] == 2:
        return roc_auc(probs[:, 1], labels == 1)
    return macro_ovr_auc(probs, labels)


def balanced_accuracy(preds: np.ndarray, labels: np.ndarray,
                      n_classes: int) -> float | None:
    """Mean per-class recall at argmax; undefined if any class is absent."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    recalls = []
    for c in range(n_classes):
        mask = labels == c
        if not mask.any():
            return None
        recalls.append(float(np.mean(preds[mask] == c)))
    return float(np.mean(recalls))


@dataclass
class MetricsReport:
    auc: float | None = None
    bacc: float | None = None
    per_cohort: dict = field(default_factory=dict)   # cohort -> {"auc", "bacc", "n"}
    probe_auc: float | None = None
    losses: dict = field(default_factory=dict)
    n_patients: int = 0

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "bacc": self.bacc,
            "per_cohort": {str(k): v for k, v in self.per_cohort.items()},
            "probe_auc": self.probe_auc,
            "losses": self.losses,
            "n_patients": self.n_patients,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            auc=d.get("auc"),
            bacc=d.get("bacc"),
            per_cohort={int(k): v for k, v in d.get("per_cohort", {}).items()},
            probe_auc=d.get("probe_auc"),
            losses=d.get("losses", {}),
            n_patients=d.get("n_patients", 0),
        )


def patient_level(probs: np.ndarray, patient_ids, labels, cohorts):
    """Average slide probability vectors per patient (order: first appearance)."""
    seen: dict[str, int] = {}
    sums, counts, plabels, pcohorts = [], [], [], []
    for i, pid in enumerate(patient_ids):
        if pid not in seen:
            seen[pid] = len(sums)
            sums.append(np.zeros(probs.shape[1]))
            counts.append(0)
            plabels.append(labels[i])
            pcohorts.append(cohorts[i])
        j = seen[pid]
        sums[j] += probs[i]
        counts[j] += 1
    agg = np.array([s / c for s, c in zip(sums, counts)])
    return agg, np.array(plabels), np.array(pcohorts)
