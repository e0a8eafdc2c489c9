"""Confusion-matrix metrics, ROC curves, AUC, and evaluation reports.

Scores are positive-class probabilities.  A score equal to the threshold
counts as a positive prediction.  Metrics with a zero denominator raise
UndefinedMetricError rather than silently returning 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import lenet
from .data import LabeledDataset


class UndefinedMetricError(ValueError):
    """A metric's denominator is zero for these counts."""


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion matrix entries at a fixed threshold."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"confusion count {name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise UndefinedMetricError("accuracy undefined: no examples")
        return (self.tp + self.tn) / self.total


def confusion_at_threshold(
    scores, labels, threshold: float = 0.5
) -> ConfusionCounts:
    """Count TP/TN/FP/FN with score >= threshold predicting positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.ndim != 1:
        raise ValueError("scores and labels must be rank-1 sequences")
    if scores.shape != labels.shape:
        raise ValueError(
            f"got {scores.shape[0]} scores but {labels.shape[0]} labels"
        )
    if scores.size == 0:
        raise ValueError("cannot build a confusion matrix from zero examples")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pred = scores >= threshold
    actual = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & actual)),
        tn=int(np.sum(~pred & ~actual)),
        fp=int(np.sum(pred & ~actual)),
        fn=int(np.sum(~pred & actual)),
    )


def precision(c: ConfusionCounts) -> float:
    """TP / (TP + FP)."""
    if c.tp + c.fp == 0:
        raise UndefinedMetricError("precision undefined: no positive predictions")
    return c.tp / (c.tp + c.fp)


def sensitivity(c: ConfusionCounts) -> float:
    """TP / (TP + FN), also called recall."""
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("sensitivity undefined: no positive examples")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    """TN / (TN + FP)."""
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("specificity undefined: no negative examples")
    return c.tn / (c.tn + c.fp)


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------

def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) points swept over thresholds at each unique score.

    Thresholds run from +inf (the (0,0) point) down through every unique
    score; tied scores enter together, contributing a single point.  The
    final threshold (the minimum score) predicts everything positive, so
    the curve always ends at (1,1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be rank-1 sequences of equal length")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"ROC undefined: need both classes, got {n_pos} positive / {n_neg} negative"
        )
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = (labels[order] == 1).astype(np.int64)
    # last index of each run of tied scores
    boundaries = np.flatnonzero(np.diff(sorted_scores))
    cut = np.concatenate([boundaries, [scores.size - 1]])
    tps = np.cumsum(sorted_pos)[cut]
    fps = (cut + 1) - tps
    points = [(0.0, 0.0)]
    points.extend((fp / n_neg, tp / n_pos) for fp, tp in zip(fps, tps))
    return points


def auc(points: list[tuple[float, float]]) -> float:
    """Trapezoidal area under an ROC point list.

    The points must be monotone: FPR and TPR each non-decreasing.
    """
    if len(points) < 2:
        raise ValueError(f"AUC needs at least 2 points, got {len(points)}")
    fpr = np.asarray([p[0] for p in points], dtype=np.float64)
    tpr = np.asarray([p[1] for p in points], dtype=np.float64)
    if np.any(np.diff(fpr) < 0) or np.any(np.diff(tpr) < 0):
        raise ValueError("malformed ROC points: FPR and TPR must be non-decreasing")
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


# ---------------------------------------------------------------------------
# Evaluation reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalMeta:
    """Run provenance attached to a report.

    training_setting is "centralized" or "federated"; distribution and
    interval are None for centralized runs.
    """

    stage: str
    training_setting: str
    distribution: str | None = None
    interval: int | None = None


@dataclass
class EvalReport:
    """Evaluation result of one trained model on one test set."""

    stage: str
    training_setting: str
    distribution: str | None
    interval: int | None
    counts: ConfusionCounts
    auc: float
    precision: float
    sensitivity: float
    specificity: float
    roc: list[tuple[float, float]]
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.roc[0] != (0.0, 0.0) or self.roc[-1] != (1.0, 1.0):
            raise ValueError("ROC must start at (0,0) and end at (1,1)")
        fpr = [p[0] for p in self.roc]
        tpr = [p[1] for p in self.roc]
        if any(b < a for a, b in zip(fpr, fpr[1:])) or any(
            b < a for a, b in zip(tpr, tpr[1:])
        ):
            raise ValueError("ROC points must be monotone non-decreasing")
        for name in ("auc", "precision", "sensitivity", "specificity"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {value}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["roc"] = [list(p) for p in self.roc]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        return cls(
            stage=raw["stage"],
            training_setting=raw["training_setting"],
            distribution=raw["distribution"],
            interval=raw["interval"],
            counts=ConfusionCounts(**raw["counts"]),
            auc=raw["auc"],
            precision=raw["precision"],
            sensitivity=raw["sensitivity"],
            specificity=raw["specificity"],
            roc=[tuple(p) for p in raw["roc"]],
            extra=dict(raw.get("extra", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def positive_scores(weights: lenet.ModelWeights, dataset: LabeledDataset) -> np.ndarray:
    """Positive-class probabilities over the dataset, in dataset order."""
    scores = np.empty(len(dataset), dtype=np.float64)
    chunk = 256
    for start in range(0, len(dataset), chunk):
        probs = lenet.forward(weights, dataset.images[start : start + chunk])
        scores[start : start + probs.shape[0]] = probs[:, 1]
    return scores


def evaluate(
    weights: lenet.ModelWeights,
    test: LabeledDataset,
    meta: EvalMeta,
    extra: dict[str, str] | None = None,
) -> EvalReport:
    """Score the test set and assemble the full report.

    Uses the 0.5 threshold for the confusion matrix and the full score
    sweep for ROC/AUC.
    """
    scores = positive_scores(weights, test)
    counts = confusion_at_threshold(scores, test.labels, 0.5)
    roc = roc_curve(scores, test.labels)
    return EvalReport(
        stage=meta.stage,
        training_setting=meta.training_setting,
        distribution=meta.distribution,
        interval=meta.interval,
        counts=counts,
        auc=auc(roc),
        precision=precision(counts),
        sensitivity=sensitivity(counts),
        specificity=specificity(counts),
        roc=roc,
        extra=dict(extra or {}),
    )


def write_report_json(report: EvalReport, path) -> None:
    Path(path).write_text(report.to_json(), encoding="ascii")


def write_roc_csv(points: list[tuple[float, float]], path) -> None:
    """Two-column CSV of the ROC points, full float precision."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in points:
            writer.writerow([repr(float(fpr)), repr(float(tpr))])
