"""Confusion-matrix statistics for precision-first screening.

All scoring in the package funnels through these functions so that the
zero-denominator conventions are applied in exactly one place: precision
(and therefore any F-beta) is 0 when nothing was predicted positive, and
recall is 0 when the scored set contains no positives. Without a total
convention degenerate candidate policies could not be ranked.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary confusion counts; `total` must equal the number scored."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    """Summary statistics for one scored prediction set."""

    accuracy: float
    precision: float
    recall: float
    f_beta: float
    beta: float
    base_rate: float
    lift: float
    n_scored: int
    n_parse_failures: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> str:
        payload = {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f_beta": self.f_beta,
            "beta": self.beta,
            "base_rate": self.base_rate,
            "lift": self.lift,
            "n_scored": self.n_scored,
            "n_parse_failures": self.n_parse_failures,
        }
        return json.dumps(payload, sort_keys=True)


def confusion(predictions: list[bool], labels: list[bool]) -> ConfusionMatrix:
    """Count tp/fp/tn/fn for aligned prediction and label lists."""
    if len(predictions) != len(labels):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels"
        )
    if not predictions:
        raise ValueError("cannot build a confusion matrix from empty input")
    tp = fp = tn = fn = 0
    for pred, label in zip(predictions, labels):
        if pred and label:
            tp += 1
        elif pred and not label:
            fp += 1
        elif not pred and label:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def f_beta(precision: float, recall: float, beta: float = 0.5) -> float:
    """Weighted F measure; beta < 1 favours precision."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    denom = beta * beta * precision + recall
    if denom <= 0:
        return 0.0
    return (1 + beta * beta) * precision * recall / denom


def base_rate(pos: int, neg: int) -> float:
    """Fraction of positives in a set of pos + neg records."""
    if pos < 0 or neg < 0:
        raise ValueError("counts must be >= 0")
    if pos + neg == 0:
        raise ValueError("base rate of an empty set is undefined")
    return pos / (pos + neg)


def lift(precision: float, base: float) -> float:
    """Precision relative to the base rate of the evaluated set."""
    if base <= 0:
        raise ValueError(f"lift requires a positive base rate, got {base}")
    return precision / base


def summarize(
    cm: ConfusionMatrix,
    beta: float = 0.5,
    base: float | None = None,
    n_parse_failures: int = 0,
) -> MetricsReport:
    """Turn a confusion matrix into a full report.

    `base` defaults to the positive fraction of the matrix itself; pass it
    explicitly when the matrix was computed on a slice of a larger set.
    """
    total = cm.total
    if total == 0:
        raise ValueError("cannot summarize an empty confusion matrix")
    accuracy = (cm.tp + cm.tn) / total
    predicted_pos = cm.tp + cm.fp
    actual_pos = cm.tp + cm.fn
    precision = cm.tp / predicted_pos if predicted_pos > 0 else 0.0
    recall = cm.tp / actual_pos if actual_pos > 0 else 0.0
    fb = f_beta(precision, recall, beta)
    if base is None:
        base = actual_pos / total
    report_lift = precision / base if base > 0 else 0.0
    return MetricsReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f_beta=fb,
        beta=beta,
        base_rate=base,
        lift=report_lift,
        n_scored=total,
        n_parse_failures=n_parse_failures,
    )


def aggregate(reports: list[MetricsReport]) -> MetricsReport:
    """Mean of per-report metrics (not pooled counts).

    Multi-subset summaries average each subset's accuracy/precision/recall/
    F-beta; counts are summed.
    """
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    betas = {r.beta for r in reports}
    if len(betas) != 1:
        raise ValueError(f"cannot aggregate reports with mixed beta values: {sorted(betas)}")
    k = len(reports)
    mean_precision = sum(r.precision for r in reports) / k
    mean_base = sum(r.base_rate for r in reports) / k
    return MetricsReport(
        accuracy=sum(r.accuracy for r in reports) / k,
        precision=mean_precision,
        recall=sum(r.recall for r in reports) / k,
        f_beta=sum(r.f_beta for r in reports) / k,
        beta=betas.pop(),
        base_rate=mean_base,
        lift=mean_precision / mean_base if mean_base > 0 else 0.0,
        n_scored=sum(r.n_scored for r in reports),
        n_parse_failures=sum(r.n_parse_failures for r in reports),
    )
