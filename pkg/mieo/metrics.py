"""Binary classification reports laid out like a per-class results table.

Class 1 is the positive class. Metrics whose denominator is zero are reported
as 0 and named in ``MetricsReport.undefined`` so that degenerate models still
rank deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Any, Sequence

import numpy as np
from sklearn import metrics as sk_metrics
from tabulate import tabulate

from .exceptions import EmptyDatasetError, MieoValidationError, ShapeError

logger = logging.getLogger(__name__)

CLASSES = (0, 1)
DIGITS = 3


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def _binary_vector(values: Any, name: str) -> np.ndarray:
    array = np.asarray(values)
    if array.ndim != 1:
        raise ShapeError(f"{name} must be a 1-D vector, got shape {array.shape}.")
    if not np.isin(array, CLASSES).all():
        raise MieoValidationError(f"{name} must only contain 0 and 1.")
    return array.astype(np.int8)


def confusion_matrix(predictions: Any, labels: Any) -> ConfusionCounts:
    predictions = _binary_vector(predictions, "predictions")
    labels = _binary_vector(labels, "labels")
    if predictions.shape != labels.shape:
        raise ShapeError(
            f"Got {predictions.size} predictions for {labels.size} labels."
        )
    if labels.size == 0:
        return ConfusionCounts(0, 0, 0, 0)
    tn, fp, fn, tp = sk_metrics.confusion_matrix(
        labels, predictions, labels=list(CLASSES)
    ).ravel()
    return ConfusionCounts(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1-score": self.f1,
            "support": self.support,
        }


def _ratio(numerator: int, denominator: int) -> float | None:
    return numerator / denominator if denominator else None


def harmonic_mean(precision: float, recall: float) -> float | None:
    if precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def macro_average(values: Sequence[float]) -> float:
    return float(sum(values) / len(values))


def weighted_average(values: Sequence[float], supports: Sequence[int]) -> float:
    total = sum(supports)
    if total == 0:
        return 0.0
    return float(sum(v * s for v, s in zip(values, supports)) / total)


@dataclass(frozen=True)
class MetricsReport:
    counts: ConfusionCounts
    classes: tuple[ClassMetrics, ClassMetrics]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    balanced_accuracy: float
    undefined: tuple[str, ...] = ()

    @property
    def support(self) -> int:
        return self.counts.total

    def to_dict(self) -> dict[str, Any]:
        return {
            "0": self.classes[0].to_dict(),
            "1": self.classes[1].to_dict(),
            "accuracy": self.accuracy,
            "macro avg": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1-score": self.macro_f1,
                "support": self.support,
            },
            "weighted avg": {
                "precision": self.weighted_precision,
                "recall": self.weighted_recall,
                "f1-score": self.weighted_f1,
                "support": self.support,
            },
            "balanced_accuracy": self.balanced_accuracy,
            "confusion": self.counts.to_dict(),
            "undefined": list(self.undefined),
        }


def classification_report(predictions: Any, labels: Any) -> MetricsReport:
    """Per-class precision, recall and F1 with their macro and weighted averages."""
    counts = confusion_matrix(predictions, labels)
    if counts.total == 0:
        raise EmptyDatasetError("Cannot report metrics on zero rows.")

    # (true positives, predicted positives, actual positives) seen from each class
    per_class = {
        0: (counts.tn, counts.tn + counts.fn, counts.tn + counts.fp),
        1: (counts.tp, counts.tp + counts.fp, counts.tp + counts.fn),
    }
    classes, undefined = [], []
    for c in CLASSES:
        hits, predicted, actual = per_class[c]
        precision = _ratio(hits, predicted)
        recall = _ratio(hits, actual)
        if precision is None:
            undefined.append(f"precision_{c}")
        if recall is None:
            undefined.append(f"recall_{c}")
        precision, recall = precision or 0.0, recall or 0.0
        f1 = harmonic_mean(precision, recall)
        if f1 is None:
            undefined.append(f"f1_{c}")
        classes.append(ClassMetrics(precision, recall, f1 or 0.0, actual))

    supports = [m.support for m in classes]
    recalls = [m.recall for m in classes]
    macro_recall = macro_average(recalls)
    # Support-weighted recall is (tn + tp) / n, which is the accuracy itself.
    accuracy = (counts.tp + counts.tn) / counts.total
    return MetricsReport(
        counts=counts,
        classes=tuple(classes),
        accuracy=accuracy,
        macro_precision=macro_average([m.precision for m in classes]),
        macro_recall=macro_recall,
        macro_f1=macro_average([m.f1 for m in classes]),
        weighted_precision=weighted_average([m.precision for m in classes], supports),
        weighted_recall=accuracy,
        weighted_f1=weighted_average([m.f1 for m in classes], supports),
        balanced_accuracy=macro_recall,
        undefined=tuple(undefined),
    )


HEADERS = ["", "Precision", "Recall", "F1", "Support"]


def _rows(report: MetricsReport) -> list[list[Any]]:
    support = report.support
    return [
        ["0", *_triple(report.classes[0]), report.classes[0].support],
        ["1", *_triple(report.classes[1]), report.classes[1].support],
        ["Accuracy", None, None, report.accuracy, support],
        [
            "Macro avg",
            report.macro_precision,
            report.macro_recall,
            report.macro_f1,
            support,
        ],
        [
            "Weighted avg",
            report.weighted_precision,
            report.weighted_recall,
            report.weighted_f1,
            support,
        ],
    ]


def _triple(metrics: ClassMetrics) -> tuple[float, float, float]:
    return metrics.precision, metrics.recall, metrics.f1


def format_report(report: MetricsReport, title: str | None = None) -> str:
    """Text table with one row per class, then accuracy and the two averages."""
    table = tabulate(
        _rows(report),
        headers=HEADERS,
        floatfmt=f".{DIGITS}f",
        missingval="",
        tablefmt="simple",
    )
    text = table + f"\nBalanced accuracy: {report.balanced_accuracy:.{DIGITS}f}"
    return text if title is None else f"{title}\n{text}"


def format_table(
    columns: Sequence[tuple[str, MetricsReport]], title: str | None = None
) -> str:
    """Several reports of the same split side by side, sharing the support column.

    ``columns`` pairs a model name with its report, for example
    ``[("MIEO+ANN", r1), ("ANN", r2)]``.
    """
    if not columns:
        raise MieoValidationError("Nothing to format.")
    supports = {report.support for _, report in columns}
    if len(supports) != 1:
        raise MieoValidationError("Reports laid side by side must share their rows.")

    headers = ["Class"]
    for name, _ in columns:
        headers += [f"{name} Precision", f"{name} Recall", f"{name} F1"]
    headers.append("Support")

    blocks = [_rows(report) for _, report in columns]
    rows = []
    for i, first in enumerate(blocks[0]):
        row = [first[0]]
        for block in blocks:
            row += block[i][1:4]
        row.append(first[4])
        rows.append(row)
    balanced = [
        value for _, r in columns for value in (None, r.balanced_accuracy, None)
    ]
    rows.append(["Balanced acc.", *balanced, None])
    table = tabulate(
        rows, headers=headers, floatfmt=f".{DIGITS}f", missingval="", tablefmt="simple"
    )
    return table if title is None else f"{title}\n{table}"
