"""Confusion matrix, one-vs-rest precision/recall/F1 and the comparison table."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np

ORIENTATION = "rows = true class, columns = predicted class"
UNDEFINED_MARK = "*"

MODEL_LABELS = {"baseline": "CNN", "transfer": "Transfer Learning"}


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")
        if len(self.class_names) != counts.shape[0]:
            raise ValueError("class_names length does not match the matrix size")
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def permuted(self, order: Sequence[int]) -> ConfusionMatrix:
        order = list(order)
        return ConfusionMatrix(self.counts[np.ix_(order, order)],
                               tuple(self.class_names[i] for i in order))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\predicted", *self.class_names])
        for name, row in zip(self.class_names, self.counts):
            writer.writerow([name, *row.tolist()])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ConfusionMatrix:
        rows = list(csv.reader(io.StringIO(text)))
        names = tuple(rows[0][1:])
        return cls(np.array([[int(v) for v in r[1:]] for r in rows[1:]]), names)


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    # metrics whose denominator was zero (reported as 0)
    undefined: frozenset[str] = field(default_factory=frozenset)


def predict_labels(probabilities, atol: float = 1e-4) -> np.ndarray:
    """Argmax decode; ties resolve to the lowest class index."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0 or probs.shape[1] == 0:
        raise ValueError(f"expected a non-empty N x K probability matrix, got shape {probs.shape}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=atol):
        raise ValueError("probability rows must sum to 1")
    return np.argmax(probs, axis=1)


def confusion(y_true, y_pred, num_classes: int,
              class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} true labels vs {len(y_pred)} predictions")
    if len(y_true) == 0:
        raise ValueError("no samples to score")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} contains a class index outside 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    if class_names is None:
        class_names = tuple(str(i) for i in range(num_classes))
    return ConfusionMatrix(counts, tuple(class_names))


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def per_class_metrics(cm: ConfusionMatrix) -> list[ClassMetrics]:
    """One-vs-rest counts and scores for every class, in class order.

    F1 is computed as 2TP / (2TP + FP + FN), which is the harmonic mean
    of precision and recall without the extra rounding step.
    """
    counts = cm.counts
    total = int(counts.sum())
    out = []
    for c, name in enumerate(cm.class_names):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        tn = total - tp - fp - fn
        precision, p_undef = _ratio(tp, tp + fp)
        recall, r_undef = _ratio(tp, tp + fn)
        f1, f_undef = _ratio(2 * tp, 2 * tp + fp + fn)
        undefined = {m for m, flag in (("precision", p_undef), ("recall", r_undef),
                                        ("f1", f_undef)) if flag}
        out.append(ClassMetrics(name, tp, fp, fn, tn, precision, recall, f1, frozenset(undefined)))
    return out


def f1_from(precision: float, recall: float) -> float:
    """Harmonic mean of a precision/recall pair (0 when both are 0)."""
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    return int(np.trace(cm.counts)) / total


def percent(value: float) -> int:
    """Render a fraction as an integer percentage, rounding half up."""
    # round first so 0.125 * 100 = 12.499999... style noise cannot flip the result
    return int(Decimal(repr(round(value * 100.0, 9))).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ClassificationReport:
    model_label: str
    rows: tuple[ClassMetrics, ...]
    accuracy: float
    confusion: ConfusionMatrix

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.rows)

    def display_rows(self) -> list[tuple[str, str, str, str]]:
        """(class, precision %, recall %, f1 %) strings, flagged if undefined."""
        out = []
        for r in self.rows:
            cells = []
            for metric in ("precision", "recall", "f1"):
                text = str(percent(getattr(r, metric)))
                if metric in r.undefined:
                    text += UNDEFINED_MARK
                cells.append(text)
            out.append((r.name, *cells))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "precision", "recall", "f1"])
        for r in self.rows:
            writer.writerow([r.name, f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}"])
        writer.writerow(["accuracy", f"{self.accuracy:.6f}"])
        return buf.getvalue()


def build_report(cm: ConfusionMatrix, class_names: Sequence[str] | None = None,
                 model_label: str = "model") -> ClassificationReport:
    if class_names is None:
        class_names = cm.class_names
    if len(class_names) != cm.num_classes:
        raise ValueError(
            f"{len(class_names)} class names given for a {cm.num_classes}-class confusion matrix")
    cm = ConfusionMatrix(cm.counts, tuple(class_names))
    return ClassificationReport(model_label, tuple(per_class_metrics(cm)),
                                overall_accuracy(cm), cm)


HEADER = ("Model", "Class", "Precision (%)", "Recall (%)", "F1-score (%)", "Accuracy (%)")


def render_table(reports: Sequence[ClassificationReport]) -> str:
    """Aligned plain-text table, one block per model, accuracy on each block's first row."""
    body = []
    for report in reports:
        acc = str(percent(report.accuracy))
        for i, (name, p, r, f) in enumerate(report.display_rows()):
            body.append((report.model_label if i == 0 else "", name, p, r, f, acc if i == 0 else ""))
        body.append(None)

    widths = [max(len(HEADER[j]), *(len(row[j]) for row in body if row)) for j in range(len(HEADER))]

    def fmt(row):
        left = [row[0].ljust(widths[0]), row[1].ljust(widths[1])]
        right = [row[j].rjust(widths[j]) for j in range(2, len(HEADER))]
        return "  ".join(left + right).rstrip()

    rule = "-" * len(fmt(HEADER))
    lines = [rule, fmt(HEADER), rule]
    for row in body:
        lines.append(rule if row is None else fmt(row))
    if any(r.undefined for rep in reports for r in rep.rows):
        lines.append(f"{UNDEFINED_MARK} zero denominator; reported as 0")
    return "\n".join(lines) + "\n"


def render_confusion(cm: ConfusionMatrix) -> str:
    width = max(len(str(cm.counts.max())), *(len(n) for n in cm.class_names))
    label_w = max(len(n) for n in cm.class_names)
    lines = [f"Confusion matrix ({ORIENTATION})",
             " " * label_w + "  " + "  ".join(n.rjust(width) for n in cm.class_names)]
    for name, row in zip(cm.class_names, cm.counts):
        lines.append(name.ljust(label_w) + "  " + "  ".join(str(v).rjust(width) for v in row))
    return "\n".join(lines) + "\n"


def render_report(report: ClassificationReport) -> str:
    """Table plus its confusion matrix, for ``report.txt``."""
    return render_table([report]) + "\n" + render_confusion(report.confusion)
