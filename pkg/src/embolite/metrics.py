"""Classification metrics: confusion counts, ROC/AUROC, stratified reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import HIGH_SEVERITIES, LOW_SEVERITIES


class UndefinedMetricError(Exception):
    """Raised when a metric is undefined for the given inputs (e.g. one-class AUC)."""


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else float("nan")

    @property
    def precision(self) -> float:
        denom = self.tp + self.fp
        return self.tp / denom if denom else float("nan")

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        if np.isnan(p) or np.isnan(r) or p + r == 0:
            return 0.0
        return 2 * p * r / (p + r)


@dataclass
class RocCurve:
    points: list  # [(fpr, tpr)] from (0,0) to (1,1), both coordinates nondecreasing
    auc: float


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Counts with score >= threshold predicted positive."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.size == 0:
        raise ValueError("confusion() requires at least one sample")
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape} vs {labels.shape}")
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
    )


def auroc(scores, labels) -> RocCurve:
    """Threshold sweep over unique scores with trapezoidal integration.

    Equal scores are grouped into a single ROC step, which makes the area
    identical to pair counting with half-credit for ties.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC undefined: need both classes, got {n_pos} positives / {n_neg} negatives"
        )
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]

    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(sorted_scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(np.sum(sorted_labels[i:j] == 1))
        fp += int(np.sum(sorted_labels[i:j] == 0))
        points.append((fp / n_neg, tp / n_pos))
        i = j

    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return RocCurve(points, auc)


@dataclass
class PredictionRow:
    study_id: str
    score: float
    label: int
    severity: str = "none"
    noise_profile: str = "standard"


@dataclass
class StratumReport:
    stratum: str
    n_pos: int
    n_neg: int
    auc: float | None  # None when the stratum has a single class
    f1: float
    acc: float
    rec: float
    prec: float


def _report_for(stratum: str, rows, threshold: float) -> StratumReport:
    scores = [r.score for r in rows]
    labels = [r.label for r in rows]
    counts = confusion(scores, labels, threshold)
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    try:
        auc = auroc(scores, labels).auc
    except UndefinedMetricError:
        auc = None
    return StratumReport(stratum, n_pos, n_neg, auc, counts.f1, counts.accuracy,
                         counts.recall, counts.precision)


def stratified_report(rows, threshold: float = 0.5) -> list:
    """Overall plus per-severity, severity-group, and per-noise-profile strata.

    Severity strata pool all negatives with the positives of one tier, so each
    tier's AUC answers "how well are these positives separated from normals".
    """
    rows = list(rows)
    if not rows:
        raise ValueError("stratified_report requires at least one prediction row")
    reports = [_report_for("overall", rows, threshold)]

    negatives = [r for r in rows if r.label == 0]
    severities = sorted({r.severity for r in rows if r.label == 1})
    for sev in severities:
        subset = [r for r in rows if r.label == 1 and r.severity == sev] + negatives
        reports.append(_report_for(f"severity:{sev}", subset, threshold))
    for group_name, members in (("low", LOW_SEVERITIES), ("high", HIGH_SEVERITIES)):
        subset = [r for r in rows if r.label == 1 and r.severity in members] + negatives
        if len(subset) > len(negatives):
            reports.append(_report_for(f"severity:{group_name}", subset, threshold))

    profiles = sorted({r.noise_profile for r in rows})
    if len(profiles) > 1:
        for profile in profiles:
            subset = [r for r in rows if r.noise_profile == profile]
            reports.append(_report_for(f"noise:{profile}", subset, threshold))
    return reports


def format_report_table(reports) -> str:
    """Fixed-width table for terminal display."""
    headers = ["stratum", "n_pos", "n_neg", "auc", "f1", "acc", "rec", "prec"]
    rows = []
    for r in reports:
        rows.append([
            r.stratum, str(r.n_pos), str(r.n_neg),
            "N/A" if r.auc is None else f"{r.auc:.4f}",
            f"{r.f1:.4f}", f"{r.acc:.4f}",
            "N/A" if np.isnan(r.rec) else f"{r.rec:.4f}",
            "N/A" if np.isnan(r.prec) else f"{r.prec:.4f}",
        ])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)
