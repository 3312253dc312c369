"""Confusion-matrix statistics, ROC curve, and AUC.

Tied scores are grouped into a single ROC vertex, which makes the
trapezoidal AUC equal the pairwise Mann-Whitney statistic (ties counting
one half) exactly. Metrics with a zero denominator are reported as None
rather than coerced to 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


class BasicMetrics(NamedTuple):
    acc: float | None
    pre: float | None
    sen: float | None
    spe: float | None


def confusion(
    labels: Sequence[int], probs: Sequence[float], threshold: float = 0.5
) -> ConfusionCounts:
    """Count TP/TN/FP/FN at the given probability threshold (p >= threshold
    predicts positive)."""
    labels = np.asarray(labels)
    probs = np.asarray(probs, dtype=float)
    if labels.shape != probs.shape:
        raise DataError(
            f"labels shape {labels.shape} != probs shape {probs.shape}"
        )
    pred = probs >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def basic_metrics(c: ConfusionCounts) -> BasicMetrics:
    """Accuracy, precision, sensitivity, specificity; None when undefined."""
    return BasicMetrics(
        acc=_ratio(c.tp + c.tn, c.total),
        pre=_ratio(c.tp, c.tp + c.fp),
        sen=_ratio(c.tp, c.tp + c.fn),
        spe=_ratio(c.tn, c.tn + c.fp),
    )


def roc_auc(
    labels: Sequence[int], probs: Sequence[float]
) -> tuple[list[tuple[float, float]], float]:
    """ROC polyline (fpr, tpr) and trapezoidal AUC.

    Thresholds sweep the distinct scores in descending order; equal scores
    collapse to one vertex. Requires both classes present.
    """
    labels = np.asarray(labels)
    probs = np.asarray(probs, dtype=float)
    if labels.shape != probs.shape:
        raise DataError("labels and probs must have matching shapes")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC requires at least one positive and one negative label")

    order = np.argsort(-probs, kind="stable")
    sorted_probs = probs[order]
    sorted_pos = (labels[order] == 1).astype(np.int64)

    # Last index of each tie group.
    distinct = np.nonzero(np.diff(sorted_probs))[0]
    boundaries = np.concatenate([distinct, [len(sorted_probs) - 1]])

    tps = np.cumsum(sorted_pos)[boundaries]
    fps = 1 + boundaries - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def pairwise_auc(labels: Sequence[int], probs: Sequence[float]) -> float:
    """Brute-force Mann-Whitney statistic: fraction of (positive, negative)
    pairs ranked correctly, ties counting 0.5. Oracle for roc_auc."""
    labels = np.asarray(labels)
    probs = np.asarray(probs, dtype=float)
    pos = probs[labels == 1]
    neg = probs[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("pairwise AUC requires both classes")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


@dataclass
class EvalReport:
    counts: ConfusionCounts
    acc: float | None
    pre: float | None
    sen: float | None
    spe: float | None
    roc: list[tuple[float, float]] = field(repr=False)
    auc: float = 0.0
    learned_cuts: list[float] | None = None


def evaluate_probs(
    labels: Sequence[int],
    probs: Sequence[float],
    threshold: float = 0.5,
    learned_cuts: list[float] | None = None,
) -> EvalReport:
    counts = confusion(labels, probs, threshold)
    m = basic_metrics(counts)
    roc, auc = roc_auc(labels, probs)
    return EvalReport(
        counts=counts,
        acc=m.acc,
        pre=m.pre,
        sen=m.sen,
        spe=m.spe,
        roc=roc,
        auc=auc,
        learned_cuts=learned_cuts,
    )


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{100 * value:.2f}%"


def format_report(report: EvalReport) -> str:
    c = report.counts
    lines = [
        f"samples   {c.total} (tp={c.tp} tn={c.tn} fp={c.fp} fn={c.fn})",
        f"accuracy     {_fmt(report.acc)}",
        f"precision    {_fmt(report.pre)}",
        f"sensitivity  {_fmt(report.sen)}",
        f"specificity  {_fmt(report.spe)}",
        f"auc          {report.auc:.4f}",
    ]
    if report.learned_cuts is not None:
        cuts = ", ".join(f"{c:.4f}" for c in report.learned_cuts)
        lines.append(f"window cuts  [{cuts}]")
    return "\n".join(lines)


def write_report_csv(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Emit metrics.csv (one row) and roc.csv (fpr,tpr points)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    roc_path = out_dir / "roc.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tp", "tn", "fp", "fn", "acc", "pre", "sen", "spe", "auc", "cuts"])
        c = report.counts
        writer.writerow(
            [
                c.tp,
                c.tn,
                c.fp,
                c.fn,
                *("" if v is None else f"{v:.6f}" for v in (report.acc, report.pre, report.sen, report.spe)),
                f"{report.auc:.6f}",
                "" if report.learned_cuts is None else "|".join(f"{x:.6f}" for x in report.learned_cuts),
            ]
        )
    with open(roc_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in report.roc:
            writer.writerow([f"{fpr:.6f}", f"{tpr:.6f}"])
    return metrics_path, roc_path
