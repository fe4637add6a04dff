"""Confusion matrix, headline metrics, ROC/AUC and report files.

Positive class is PNEUMONIA (label 1) throughout.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

from .errors import DataError, OutputError
from .train import EpochLog

HISTORY_HEADER = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"]


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int = 0
    fp: int = 0
    fn: int = 0
    tp: int = 0

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tn + other.tn, self.fp + other.fp, self.fn + other.fn, self.tp + other.tp)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: ConfusionMatrix
    degenerate: frozenset = frozenset()


@dataclass(frozen=True)
class RocCurve:
    thresholds: tuple
    fpr: tuple
    tpr: tuple
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr, self.tpr))


def _validate_pairs(pairs):
    pairs = [(float(p), int(y)) for p, y in pairs]
    if not pairs:
        raise DataError("no predictions given")
    for p, y in pairs:
        if y not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {y}")
        if math.isnan(p):
            raise DataError("prediction is NaN")
    return pairs


def confusion_from_predictions(pairs: Iterable[tuple], threshold: float = 0.5) -> ConfusionMatrix:
    """Tally (probability, label) pairs; a prediction is positive iff p >= threshold."""
    tn = fp = fn = tp = 0
    for p, y in _validate_pairs(pairs):
        if p >= threshold:
            tp, fp = (tp + 1, fp) if y == 1 else (tp, fp + 1)
        else:
            fn, tn = (fn + 1, tn) if y == 1 else (fn, tn + 1)
    return ConfusionMatrix(tn, fp, fn, tp)


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, precision, recall and F1; a 0/0 ratio yields 0 and a degenerate flag."""
    if cm.total < 1:
        raise DataError("confusion matrix is empty")
    flags = set()

    def ratio(num, den, flag):
        if den == 0:
            flags.add(flag)
            return 0.0
        return num / den

    accuracy = (cm.tp + cm.tn) / cm.total
    precision = ratio(cm.tp, cm.tp + cm.fp, "no_positive_predictions")
    recall = ratio(cm.tp, cm.tp + cm.fn, "no_positive_labels")
    f1 = ratio(2 * precision * recall, precision + recall, "f1_undefined")
    return MetricsReport(accuracy, precision, recall, f1, cm, frozenset(flags))


def roc_auc(pairs: Iterable[tuple]) -> RocCurve:
    """ROC by sweeping every distinct score, AUC by the trapezoid rule.

    Tied scores move both rates at once, which is what gives ties half credit.
    """
    pairs = _validate_pairs(pairs)
    n_pos = sum(y for _, y in pairs)
    n_neg = len(pairs) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs at least one positive and one negative label")
    pairs.sort(key=lambda t: -t[0])
    thresholds, tps, fps = [math.inf], [0], [0]
    tp = fp = 0
    i = 0
    while i < len(pairs):
        score = pairs[i][0]
        while i < len(pairs) and pairs[i][0] == score:
            tp += pairs[i][1]
            fp += 1 - pairs[i][1]
            i += 1
        thresholds.append(score)
        tps.append(tp)
        fps.append(fp)
    twice_area = sum((fps[k] - fps[k - 1]) * (tps[k] + tps[k - 1]) for k in range(1, len(tps)))
    auc = twice_area / (2 * n_pos * n_neg)
    return RocCurve(
        tuple(thresholds),
        tuple(f / n_neg for f in fps),
        tuple(t / n_pos for t in tps),
        auc,
    )


# --- files -----------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_history_csv(logs: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for log in logs:
            w.writerow([log.epoch, _fmt(log.train_loss), _fmt(log.train_accuracy),
                        _fmt(log.val_loss), _fmt(log.val_accuracy), _fmt(log.learning_rate)])


def read_history_csv(path) -> list[EpochLog]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != HISTORY_HEADER:
        raise DataError(f"{path} is not a history file")
    return [EpochLog(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:]]


def write_metrics_csv(report: MetricsReport, path, roc: RocCurve | None = None, threshold=None) -> None:
    cm = report.confusion
    rows = [
        ("accuracy", _fmt(report.accuracy)),
        ("precision", _fmt(report.precision)),
        ("recall", _fmt(report.recall)),
        ("f1", _fmt(report.f1)),
        ("tn", cm.tn), ("fp", cm.fp), ("fn", cm.fn), ("tp", cm.tp),
    ]
    if roc is not None:
        rows.append(("auc", _fmt(roc.auc)))
    if threshold is not None:
        rows.append(("threshold", _fmt(threshold)))
    rows.append(("degenerate", ";".join(sorted(report.degenerate))))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(rows)


def write_roc_csv(roc: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
            w.writerow(["inf" if math.isinf(t) else _fmt(t), _fmt(f), _fmt(p)])


# --- SVG -------------------------------------------------------------------

CHART_W, CHART_H = 800, 400
_MARGIN = dict(left=70, right=150, top=40, bottom=50)
_COLORS = ("#1f77b4", "#d62728", "#2ca02c")


def _line_chart(y_off, title, xlabel, ylabel, series, x_range, y_range, diagonal=False):
    """One 800x400 panel; ``series`` is a list of (label, xs, ys)."""
    left, top = _MARGIN["left"], _MARGIN["top"]
    pw = CHART_W - left - _MARGIN["right"]
    ph = CHART_H - top - _MARGIN["bottom"]
    (x0, x1), (y0, y1) = x_range, y_range
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return y_off + top + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<g class="chart">',
           f'<text x="{CHART_W / 2:.1f}" y="{y_off + 24}" text-anchor="middle" font-size="16">{escape(title)}</text>',
           f'<rect x="{left}" y="{y_off + top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>']
    for k in range(5):
        fx = x0 + (x1 - x0) * k / 4
        fy = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{sx(fx):.1f}" y="{y_off + top + ph + 18}" text-anchor="middle" font-size="11">{fx:.3g}</text>')
        out.append(f'<text x="{left - 6}" y="{sy(fy) + 4:.1f}" text-anchor="end" font-size="11">{fy:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{y_off + CHART_H - 10}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{y_off + top + ph / 2:.1f}" text-anchor="middle" font-size="13" '
               f'transform="rotate(-90 18 {y_off + top + ph / 2:.1f})">{escape(ylabel)}</text>')
    if diagonal:
        out.append(f'<line x1="{sx(x0):.1f}" y1="{sy(y0):.1f}" x2="{sx(x1):.1f}" y2="{sy(y1):.1f}" '
                   f'stroke="#999" stroke-dasharray="4 4"/>')
    for n, (label, xs, ys) in enumerate(series):
        color = _COLORS[n % len(_COLORS)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = y_off + top + 20 + 20 * n
        out.append(f'<line x1="{left + pw + 15}" y1="{ly}" x2="{left + pw + 40}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 45}" y="{ly + 4}" font-size="12">{escape(label)}</text>')
    out.append("</g>")
    return out


def render_svg(logs: Sequence[EpochLog] = (), roc: RocCurve | None = None) -> str:
    panels = []
    if logs:
        epochs = [log.epoch for log in logs]
        xr = (min(epochs), max(epochs))
        panels.append(("Accuracy", "epoch", "accuracy", [
            ("train", epochs, [log.train_accuracy for log in logs]),
            ("validation", epochs, [log.val_accuracy for log in logs]),
        ], xr, (0.0, 1.0), False))
        losses = [v for log in logs for v in (log.train_loss, log.val_loss)]
        panels.append(("Loss", "epoch", "binary cross-entropy", [
            ("train", epochs, [log.train_loss for log in logs]),
            ("validation", epochs, [log.val_loss for log in logs]),
        ], xr, (0.0, max(losses)), False))
    if roc is not None:
        panels.append((f"ROC (AUC = {roc.auc:.4f})", "false positive rate", "true positive rate",
                       [("ROC", list(roc.fpr), list(roc.tpr))], (0.0, 1.0), (0.0, 1.0), True))
    height = CHART_H * max(len(panels), 1)
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_W}" height="{height}" '
            f'viewBox="0 0 {CHART_W} {height}">',
            f'<rect width="{CHART_W}" height="{height}" fill="#fff"/>']
    for k, panel in enumerate(panels):
        body += _line_chart(k * CHART_H, *panel)
    body.append("</svg>")
    return "\n".join(body) + "\n"


def render_report(logs: Sequence[EpochLog], metrics: MetricsReport | None, roc: RocCurve | None, out_dir,
                  threshold=None) -> list[Path]:
    """Write history.csv, metrics.csv, roc.csv and curves.svg (the last three only when available)."""
    if not logs:
        raise DataError("render_report needs at least one epoch log")
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_history_csv(logs, out / "history.csv")
        written.append(out / "history.csv")
        if metrics is not None:
            write_metrics_csv(metrics, out / "metrics.csv", roc, threshold)
            written.append(out / "metrics.csv")
        if roc is not None:
            write_roc_csv(roc, out / "roc.csv")
            written.append(out / "roc.csv")
        (out / "curves.svg").write_text(render_svg(logs, roc))
        written.append(out / "curves.svg")
    except OSError as exc:
        raise OutputError(f"cannot write report to {out}: {exc.strerror or exc}") from exc
    return written
