"""Confusion matrix and classification metrics.

All ratios are computed with `fractions.Fraction` and only converted to
64-bit floats at the serialization boundary, so the algebraic identities
(micro F1 = accuracy = weighted recall for single-label multiclass,
macro F1 = mean of per-class F1) hold exactly instead of up to rounding.

Zero-denominator convention: a metric whose denominator is zero is 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence, Union

from .errors import DataError

REPORT_SCHEMA = "meder-metrics-report/1"

# Fractions internally; floats after a JSON round-trip.
Ratio = Union[Fraction, float]


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square matrix of counts[actual][predicted].

    For class i: TP_i = counts[i][i], FP_i = column i sum - TP_i,
    FN_i = row i sum - TP_i, TN_i = total - TP_i - FP_i - FN_i.
    """

    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        n = len(self.counts)
        for row in self.counts:
            if len(row) != n:
                raise DataError(f"confusion matrix is not square: {n} rows, row of length {len(row)}")
            for c in row:
                if not isinstance(c, int) or c < 0:
                    raise DataError(f"confusion matrix counts must be non-negative integers, got {c!r}")

    @property
    def n_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def row_sum(self, i: int) -> int:
        return sum(self.counts[i])

    def col_sum(self, i: int) -> int:
        return sum(row[i] for row in self.counts)

    def tp(self, i: int) -> int:
        return self.counts[i][i]

    def fp(self, i: int) -> int:
        return self.col_sum(i) - self.tp(i)

    def fn(self, i: int) -> int:
        return self.row_sum(i) - self.tp(i)

    def tn(self, i: int) -> int:
        return self.total - self.tp(i) - self.fp(i) - self.fn(i)


@dataclass(frozen=True)
class PerClassScores:
    precision: tuple[Ratio, ...]
    recall: tuple[Ratio, ...]
    f1: tuple[Ratio, ...]
    support: tuple[int, ...]


@dataclass(frozen=True)
class MetricsReport:
    n_classes: int
    total: int
    per_class: PerClassScores
    accuracy: Ratio
    macro_precision: Ratio
    macro_recall: Ratio
    macro_f1: Ratio
    micro_f1: Ratio
    weighted_precision: Ratio
    weighted_recall: Ratio
    weighted_f1: Ratio


def confusion(golds: Sequence[int], preds: Sequence[int], n_classes: int) -> ConfusionMatrix:
    """Count (actual, predicted) label pairs into an n_classes matrix."""
    if len(golds) != len(preds):
        raise DataError(f"golds and preds differ in length: {len(golds)} vs {len(preds)}")
    counts = [[0] * n_classes for _ in range(n_classes)]
    for g, p in zip(golds, preds):
        if not (0 <= g < n_classes):
            raise DataError(f"gold label id {g} out of range for {n_classes} classes")
        if not (0 <= p < n_classes):
            raise DataError(f"predicted label id {p} out of range for {n_classes} classes")
        counts[g][p] += 1
    return ConfusionMatrix(tuple(tuple(row) for row in counts))


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def per_class(cm: ConfusionMatrix) -> PerClassScores:
    """Per-class precision, recall, F1 and support, all exact."""
    precisions, recalls, f1s, supports = [], [], [], []
    for i in range(cm.n_classes):
        tp = cm.tp(i)
        p = _ratio(tp, tp + cm.fp(i))
        r = _ratio(tp, tp + cm.fn(i))
        f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
        precisions.append(p)
        recalls.append(r)
        f1s.append(f1)
        supports.append(cm.row_sum(i))
    return PerClassScores(tuple(precisions), tuple(recalls), tuple(f1s), tuple(supports))


def aggregate(cm: ConfusionMatrix) -> MetricsReport:
    """Full metrics report: accuracy, macro/micro/weighted aggregates."""
    n = cm.total
    if n == 0:
        raise DataError("cannot aggregate metrics over an empty confusion matrix")
    pc = per_class(cm)
    k = cm.n_classes
    sum_tp = sum(cm.tp(i) for i in range(k))
    sum_fp = sum(cm.fp(i) for i in range(k))
    sum_fn = sum(cm.fn(i) for i in range(k))

    accuracy = Fraction(sum_tp, n)
    # micro F1 pools the per-class counts before forming the ratio
    micro_den = sum_tp + Fraction(1, 2) * (sum_fn + sum_fp)
    micro_f1 = sum_tp / micro_den if micro_den else Fraction(0)

    def macro(values: tuple[Ratio, ...]) -> Fraction:
        return Fraction(sum(values), k)

    def weighted(values: tuple[Ratio, ...]) -> Fraction:
        return sum((Fraction(s, n) * v for s, v in zip(pc.support, values)), Fraction(0))

    return MetricsReport(
        n_classes=k,
        total=n,
        per_class=pc,
        accuracy=accuracy,
        macro_precision=macro(pc.precision),
        macro_recall=macro(pc.recall),
        macro_f1=macro(pc.f1),
        micro_f1=micro_f1,
        weighted_precision=weighted(pc.precision),
        weighted_recall=weighted(pc.recall),
        weighted_f1=weighted(pc.f1),
    )


# ---------------------------------------------------------------------------
# Rendering


@dataclass(frozen=True)
class RenderedReport:
    table_text: str
    report_json: str
    confusion_csv: str


def _pct(value: Ratio) -> str:
    return f"{float(value) * 100:.2f}"


def render(report: MetricsReport, cm: ConfusionMatrix, labels: Sequence[str]) -> RenderedReport:
    """Render a report as a text table, a JSON document, and a confusion CSV."""
    if len(labels) != report.n_classes:
        raise DataError(f"{len(labels)} label names for {report.n_classes} classes")

    width = max(len(str(lab)) for lab in list(labels) + ["Overall Accuracy"]) + 2
    lines = [f"{'Metric':<{width}}{'Precision (%)':>15}{'Recall (%)':>13}{'F1-Score (%)':>15}"]
    pc = report.per_class
    for i, lab in enumerate(labels):
        lines.append(
            f"{lab:<{width}}{_pct(pc.precision[i]):>15}{_pct(pc.recall[i]):>13}{_pct(pc.f1[i]):>15}"
        )
    lines.append(
        f"{'Macro Avg':<{width}}{_pct(report.macro_precision):>15}"
        f"{_pct(report.macro_recall):>13}{_pct(report.macro_f1):>15}"
    )
    lines.append(
        f"{'Weighted Avg':<{width}}{_pct(report.weighted_precision):>15}"
        f"{_pct(report.weighted_recall):>13}{_pct(report.weighted_f1):>15}"
    )
    lines.append(f"{'Overall Accuracy':<{width}}{_pct(report.accuracy):>15}")
    lines.append(f"{'Micro F1-Score':<{width}}{_pct(report.micro_f1):>15}")
    lines.append(f"{'Macro F1-Score':<{width}}{_pct(report.macro_f1):>15}")
    table_text = "\n".join(lines) + "\n"

    report_json = report_to_json(report, labels)

    csv_lines = ["actual," + ",".join(str(lab) for lab in labels)]
    for i, lab in enumerate(labels):
        csv_lines.append(f"{lab}," + ",".join(str(c) for c in cm.counts[i]))
    confusion_csv = "\n".join(csv_lines) + "\n"

    return RenderedReport(table_text, report_json, confusion_csv)


def report_to_json(report: MetricsReport, labels: Sequence[str]) -> str:
    """Serialize deterministically; Fractions become 64-bit floats here."""
    pc = report.per_class
    doc = {
        "schema": REPORT_SCHEMA,
        "labels": list(labels),
        "total": report.total,
        "accuracy": float(report.accuracy),
        "macro": {
            "precision": float(report.macro_precision),
            "recall": float(report.macro_recall),
            "f1": float(report.macro_f1),
        },
        "micro_f1": float(report.micro_f1),
        "weighted": {
            "precision": float(report.weighted_precision),
            "recall": float(report.weighted_recall),
            "f1": float(report.weighted_f1),
        },
        "per_class": [
            {
                "label": str(lab),
                "precision": float(pc.precision[i]),
                "recall": float(pc.recall[i]),
                "f1": float(pc.f1[i]),
                "support": pc.support[i],
            }
            for i, lab in enumerate(labels)
        ],
    }
    return json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> tuple[MetricsReport, list[str]]:
    """Parse a report JSON document back into a MetricsReport (float-valued)."""
    doc = json.loads(text)
    if doc.get("schema") != REPORT_SCHEMA:
        raise DataError(f"unsupported report schema: {doc.get('schema')!r}")
    labels = [str(x) for x in doc["labels"]]
    per = doc["per_class"]
    pc = PerClassScores(
        precision=tuple(row["precision"] for row in per),
        recall=tuple(row["recall"] for row in per),
        f1=tuple(row["f1"] for row in per),
        support=tuple(int(row["support"]) for row in per),
    )
    report = MetricsReport(
        n_classes=len(labels),
        total=int(doc["total"]),
        per_class=pc,
        accuracy=doc["accuracy"],
        macro_precision=doc["macro"]["precision"],
        macro_recall=doc["macro"]["recall"],
        macro_f1=doc["macro"]["f1"],
        micro_f1=doc["micro_f1"],
        weighted_precision=doc["weighted"]["precision"],
        weighted_recall=doc["weighted"]["recall"],
        weighted_f1=doc["weighted"]["f1"],
    )
    return report, labels
