"""Confusion counts, recall/precision/F1 and per-category reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

NORMAL = "normal"
ANOMALOUS = "anomalous"
UNDEFINED = "undefined"

PRECISION_NOTE = ("per-category precision counts that category's frames plus every normal frame; "
                  "flagged normal frames are shared false positives across rows")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise EvaluationError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Metrics:
    """Ratios in [0, 1]; ``None`` where the denominator is zero."""

    recall: float | None
    precision: float | None
    f1: float | None


@dataclass(frozen=True)
class ReportRow:
    category: str
    total_frames: int
    cm: ConfusionMatrix
    metrics: Metrics


@dataclass
class MetricsReport:
    rows: list[ReportRow]
    overall: ReportRow
    note: str = PRECISION_NOTE


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def metrics(cm: ConfusionMatrix) -> Metrics:
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    if recall is None or precision is None or recall + precision == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Metrics(recall, precision, f1)


def percent(value: float | None) -> str:
    """Percentage rounded half-up to one decimal, or ``undefined``."""
    if value is None:
        return UNDEFINED
    d = Decimal(repr(value)) * 100
    return str(d.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def is_anomalous(label: str) -> bool:
    """Any label other than ``normal`` (including anomaly kind names) is positive."""
    return label != NORMAL


def confusion(verdicts: Sequence[str], truth: Sequence[str]) -> ConfusionMatrix:
    """Binary counts; both sequences hold ``normal`` or any anomalous label/kind."""
    if len(verdicts) != len(truth):
        raise EvaluationError(f"length mismatch: {len(verdicts)} verdicts vs {len(truth)} labels")
    tp = fp = fn = tn = 0
    for v, t in zip(verdicts, truth):
        pred, actual = is_anomalous(v), is_anomalous(t)
        if pred and actual:
            tp += 1
        elif pred:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def per_category_report(verdicts: Sequence[str], truth: Sequence[str]) -> MetricsReport:
    """One row per anomaly kind present in ``truth`` plus an overall row.

    A kind's row is evaluated on that kind's frames together with all normal
    frames, so its recall is restricted to the kind and its precision is
    charged with every flagged normal frame.
    """
    if len(verdicts) != len(truth):
        raise EvaluationError(f"length mismatch: {len(verdicts)} verdicts vs {len(truth)} labels")
    kinds = sorted({t for t in truth if is_anomalous(t)}, key=lambda k: truth.index(k))
    rows = []
    for kind in kinds:
        keep = [i for i, t in enumerate(truth) if t == kind or not is_anomalous(t)]
        cm = confusion([verdicts[i] for i in keep], [truth[i] for i in keep])
        rows.append(ReportRow(kind, sum(1 for t in truth if t == kind), cm, metrics(cm)))
    cm = confusion(verdicts, truth)
    overall = ReportRow("overall", len(truth), cm, metrics(cm))
    return MetricsReport(rows, overall)


REPORT_FIELDS = ("category", "total_frames", "recall", "precision", "f1")


def report_text(report: MetricsReport) -> str:
    header = ("category", "frames", "recall %", "precision %", "F1 %")
    body = [(r.category, str(r.total_frames), percent(r.metrics.recall), percent(r.metrics.precision),
             percent(r.metrics.f1)) for r in [*report.rows, report.overall]]
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]

    def fmt(row):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))

    lines = [f"# {report.note}", fmt(header), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def report_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in [*report.rows, report.overall]:
        w.writerow([r.category, r.total_frames, percent(r.metrics.recall), percent(r.metrics.precision),
                    percent(r.metrics.f1)])
    return buf.getvalue()


CONFUSION_FIELDS = ("tp", "fp", "fn", "tn")


def confusion_csv(cm: ConfusionMatrix) -> str:
    return "tp,fp,fn,tn\n" + f"{cm.tp},{cm.fp},{cm.fn},{cm.tn}\n"


def read_confusion_csv(text: str) -> ConfusionMatrix:
    rows = list(csv.DictReader(io.StringIO(text)))
    if len(rows) != 1:
        raise EvaluationError(f"confusion CSV must hold exactly one data row, got {len(rows)}")
    try:
        return ConfusionMatrix(*(int(rows[0][k]) for k in CONFUSION_FIELDS))
    except (KeyError, TypeError, ValueError) as exc:
        raise EvaluationError(f"bad confusion CSV: {exc}") from exc
