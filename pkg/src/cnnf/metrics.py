"""Evaluation: top-1 error, the 7x7 confusion matrix with per-class
precision/recall, overall accuracy, and report/curve emission.

Convention (fixed; the opposite is also common in the wild): rows are the
PREDICTED class and columns the TRUE class, so a row sum is "everything
predicted as c" and precision[c] = diag/row_sum ("producer accuracy"),
while recall[c] = diag/col_sum ("user accuracy").  Percentages render at
three decimals with trailing zeros stripped, e.g. 53.261%, 73.95%, 50%.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .data import CLASS_NAMES
from .errors import FormatError, LabelError, ShapeError

PRECISION_HEADER = "Producer Accuracy (Precision)"
RECALL_HEADER = "User Accuracy (Recall)"


class ConfusionMatrix:
    """K x K count grid; counts[predicted, true]."""

    def __init__(self, class_names: Sequence[str] = CLASS_NAMES,
                 counts: Optional[np.ndarray] = None):
        self.class_names = tuple(class_names)
        k = len(self.class_names)
        if counts is None:
            counts = np.zeros((k, k), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (k, k):
            raise ShapeError(f"counts must be {k}x{k}, got {counts.shape}")
        if np.any(counts < 0):
            raise ShapeError("counts must be nonnegative")
        self.counts = counts

    @property
    def k(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, predicted: int, true_label: int) -> None:
        if not (0 <= predicted < self.k and 0 <= true_label < self.k):
            raise LabelError(f"labels must lie in [0, {self.k})")
        self.counts[predicted, true_label] += 1

    def add_batch(self, predicted: Sequence[int], true_labels: Sequence[int]) -> None:
        predicted = np.asarray(predicted)
        true_labels = np.asarray(true_labels)
        if predicted.shape != true_labels.shape:
            raise ShapeError("predicted and true label arrays must match")
        for p, t in zip(predicted.tolist(), true_labels.tolist()):
            self.add(int(p), int(t))

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Commutative monoid merge of partial matrices."""
        if other.class_names != self.class_names:
            raise ShapeError("cannot merge matrices over different class sets")
        return ConfusionMatrix(self.class_names, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return (isinstance(other, ConfusionMatrix)
                and self.class_names == other.class_names
                and np.array_equal(self.counts, other.counts))


def top1_error(logits: np.ndarray, labels: Sequence[int]) -> float:
    """Fraction of rows whose argmax (ties -> lowest index) misses the label."""
    if logits.ndim != 4 or logits.shape[1] != 1 or logits.shape[2] != 1:
        raise ShapeError(f"logits must be (n, 1, 1, K), got {logits.shape}")
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels must have length {n}")
    preds = logits.reshape(n, -1).argmax(axis=1)
    return float(np.mean(preds != labels))


def predictions(logits: np.ndarray) -> np.ndarray:
    return logits.reshape(logits.shape[0], -1).argmax(axis=1)


def precision_per_class(cm: ConfusionMatrix) -> List[Optional[float]]:
    """diag / row sum; None where the class was never predicted."""
    out = []
    for i in range(cm.k):
        row = int(cm.counts[i].sum())
        out.append(None if row == 0 else int(cm.counts[i, i]) / row)
    return out


def recall_per_class(cm: ConfusionMatrix) -> List[Optional[float]]:
    """diag / column sum; None where the class never occurred."""
    out = []
    for j in range(cm.k):
        col = int(cm.counts[:, j].sum())
        out.append(None if col == 0 else int(cm.counts[j, j]) / col)
    return out


def overall_accuracy(cm: ConfusionMatrix) -> Optional[float]:
    total = cm.total
    return None if total == 0 else int(np.trace(cm.counts)) / total


@dataclass
class EvalReport:
    matrix: ConfusionMatrix
    precision: List[Optional[float]] = field(default_factory=list)
    recall: List[Optional[float]] = field(default_factory=list)
    accuracy: Optional[float] = None
    sample_count: int = 0


def report_from_matrix(cm: ConfusionMatrix) -> EvalReport:
    return EvalReport(matrix=cm, precision=precision_per_class(cm),
                      recall=recall_per_class(cm), accuracy=overall_accuracy(cm),
                      sample_count=cm.total)


def report_from_predictions(predicted: Sequence[int], true_labels: Sequence[int],
                            class_names: Sequence[str] = CLASS_NAMES) -> EvalReport:
    cm = ConfusionMatrix(class_names)
    cm.add_batch(predicted, true_labels)
    return report_from_matrix(cm)


def fmt_percent(value: Optional[float]) -> str:
    """Three decimals, trailing zeros stripped: 0.5326 -> '53.261%'."""
    if value is None:
        return "n/a"
    text = f"{value * 100.0:.3f}".rstrip("0").rstrip(".")
    return text + "%"


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def emit_report(report: EvalReport, fmt: str = "text") -> bytes:
    if fmt == "text":
        return _report_text(report).encode("utf-8")
    if fmt == "csv":
        return _report_csv(report).encode("utf-8")
    raise FormatError(f"unsupported report format {fmt!r}")


def _report_text(report: EvalReport) -> str:
    cm = report.matrix
    header = ["predicted \\ true", *cm.class_names, PRECISION_HEADER]
    rows = [header]
    for i, name in enumerate(cm.class_names):
        rows.append([name, *(str(int(v)) for v in cm.counts[i]),
                     fmt_percent(report.precision[i])])
    rows.append([RECALL_HEADER, *(fmt_percent(r) for r in report.recall), ""])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(widths[i]) if i else cell.ljust(widths[i])
                       for i, cell in enumerate(row)).rstrip()
             for row in rows]
    lines.append("")
    lines.append(f"overall accuracy: {fmt_percent(report.accuracy)} "
                 f"({int(np.trace(cm.counts))}/{report.sample_count})")
    return "\n".join(lines) + "\n"


def _report_csv(report: EvalReport) -> str:
    cm = report.matrix
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["predicted\\true", *cm.class_names, "precision"])
    for i, name in enumerate(cm.class_names):
        writer.writerow([name, *(int(v) for v in cm.counts[i]),
                         fmt_percent(report.precision[i])])
    writer.writerow(["recall", *(fmt_percent(r) for r in report.recall), ""])
    return buf.getvalue()


def parse_report_csv(data) -> ConfusionMatrix:
    """Inverse of the CSV emission (counts and class names only)."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    rows = list(csv.reader(io.StringIO(data)))
    if not rows or len(rows) < 3:
        raise FormatError("confusion CSV needs a header, count rows and a recall row")
    class_names = tuple(rows[0][1:-1])
    k = len(class_names)
    if len(rows) != k + 2:
        raise FormatError(f"expected {k + 2} rows for {k} classes, got {len(rows)}")
    counts = np.zeros((k, k), dtype=np.int64)
    for i in range(k):
        row = rows[1 + i]
        if row[0] != class_names[i]:
            raise FormatError(f"row {i + 2}: expected class {class_names[i]!r}, "
                              f"got {row[0]!r}")
        try:
            counts[i] = [int(v) for v in row[1:k + 1]]
        except ValueError as exc:
            raise FormatError(f"row {i + 2}: non-integer count ({exc})") from None
    return ConfusionMatrix(class_names, counts)


# ---------------------------------------------------------------------------
# training curves
# ---------------------------------------------------------------------------

CURVE_COLUMNS = ("epoch", "train_top1", "val_top1", "lr")


def emit_curves(history: Sequence) -> bytes:
    """History CSV: epoch,train_top1,val_top1,lr with 6-significant-digit reals."""
    buf = io.StringIO()
    buf.write(",".join(CURVE_COLUMNS) + "\n")
    for rec in history:
        buf.write(f"{rec.epoch},{rec.train_top1:.6g},{rec.val_top1:.6g},{rec.lr:.6g}\n")
    return buf.getvalue().encode("utf-8")


def parse_curves_csv(data) -> List[dict]:
    """Rows of the curves CSV; parse errors carry the 1-based line number."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    lines = [ln for ln in data.splitlines()]
    if not lines:
        raise FormatError("curves CSV is empty")
    header = lines[0].split(",")
    for col in CURVE_COLUMNS:
        if col not in header:
            raise FormatError(f"line 1: missing column {col!r}")
    idx = {col: header.index(col) for col in CURVE_COLUMNS}
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise FormatError(f"line {lineno}: expected {len(header)} fields, "
                              f"got {len(parts)}")
        try:
            rows.append({
                "epoch": int(parts[idx["epoch"]]),
                "train_top1": float(parts[idx["train_top1"]]),
                "val_top1": float(parts[idx["val_top1"]]),
                "lr": float(parts[idx["lr"]]),
            })
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    if not rows:
        raise FormatError("curves CSV has no data rows")
    return rows


def plot_curves(rows: Sequence[dict], out_path: str) -> None:
    """Render the train/validation top-1 error curves to an image file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [r["train_top1"] for r in rows], label="train",
            marker="o" if len(rows) < 3 else None)
    ax.plot(epochs, [r["val_top1"] for r in rows], label="validation",
            marker="o" if len(rows) < 3 else None)
    ax.set_xlabel("epoch")
    ax.set_ylabel("top-1 error")
    ax.set_ylim(bottom=0)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
