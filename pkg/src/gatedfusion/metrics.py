"""Binary classification metrics with Class 1 as the positive class.

Threshold metrics work from confusion counts only. Probability metrics
(Brier, log loss, ECE) and the ranking curves (ROC, precision-recall) take
the raw P(class 1) scores.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

DEFAULT_THRESHOLD = 0.5
DEFAULT_BINS = 10
LOG_LOSS_CLIP = 1e-15


@dataclass(frozen=True)
class ConfusionCounts:
    tn: int
    fp: int
    fn: int
    tp: int

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def to_dict(self) -> dict:
        return {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp}


@dataclass(frozen=True)
class ReliabilityBins:
    lower: np.ndarray
    upper: np.ndarray
    count: np.ndarray
    confidence: np.ndarray  # NaN for empty bins
    accuracy: np.ndarray  # NaN for empty bins

    def rows(self) -> list:
        out = []
        for i in range(self.count.size):
            empty = self.count[i] == 0
            out.append(
                {
                    "bin_lower": float(self.lower[i]),
                    "bin_upper": float(self.upper[i]),
                    "count": int(self.count[i]),
                    "confidence": None if empty else float(self.confidence[i]),
                    "accuracy": None if empty else float(self.accuracy[i]),
                }
            )
        return out


@dataclass(frozen=True)
class Curve:
    x: np.ndarray
    y: np.ndarray
    area: float


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    mcc: float
    brier: float
    log_loss: float
    ece: float
    confusion: ConfusionCounts
    roc: Curve
    pr: Curve
    reliability: ReliabilityBins
    extra: dict = field(default_factory=dict)

    @property
    def auc(self) -> float:
        return self.roc.area

    @property
    def average_precision(self) -> float:
        return self.pr.area

    def table_row(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "mcc": self.mcc,
            "brier": self.brier,
            "log_loss": self.log_loss,
            "ece": self.ece,
        }

    def to_dict(self, include_curves: bool = False) -> dict:
        d = dict(self.table_row())
        d["auc"] = self.auc
        d["average_precision"] = self.average_precision
        d["confusion"] = self.confusion.to_dict()
        d["reliability"] = self.reliability.rows()
        if include_curves:
            d["roc"] = {"fpr": self.roc.x.tolist(), "tpr": self.roc.y.tolist()}
            d["pr"] = {"recall": self.pr.x.tolist(), "precision": self.pr.y.tolist()}
        d.update(self.extra)
        return d


def _as_arrays(labels, probabilities):
    y = np.asarray(labels).astype(np.int64).ravel()
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise ValueError(f"labels ({y.size}) and probabilities ({p.size}) differ in length")
    return y, p


def confusion(labels, probabilities, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """Predict class 1 when p >= threshold."""
    y, p = _as_arrays(labels, probabilities)
    pred = p >= threshold
    pos = y == 1
    return ConfusionCounts(
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tp=int(np.sum(pred & pos)),
    )


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def threshold_metrics(c: ConfusionCounts) -> tuple[float, float, float]:
    """(accuracy, macro F1, MCC). MCC is 0 when any confusion marginal is empty."""
    if c.total <= 0:
        raise ValueError("confusion counts are empty")
    accuracy = (c.tp + c.tn) / c.total
    macro_f1 = 0.5 * (_f1(c.tp, c.fp, c.fn) + _f1(c.tn, c.fn, c.fp))
    marginals = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(marginals) if marginals else 0.0
    return accuracy, macro_f1, mcc


def brier(labels, probabilities) -> float:
    y, p = _as_arrays(labels, probabilities)
    return float(np.mean((p - y) ** 2))


def log_loss(labels, probabilities, clip: float = LOG_LOSS_CLIP) -> float:
    y, p = _as_arrays(labels, probabilities)
    p = np.clip(p, clip, 1.0 - clip)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1.0 - p)))


def ece(labels, probabilities, n_bins: int = DEFAULT_BINS, mode: str = "max"):
    """Expected calibration error over equal-width bins.

    ``mode="max"`` bins the top-class confidence max(p, 1-p) and compares it
    with the hit rate of the 0.5-threshold prediction. ``mode="positive"``
    bins p itself against the observed class-1 frequency. A value sitting on
    an interior edge belongs to the upper bin; 1.0 falls in the last bin.

    Returns ``(ece, ReliabilityBins)``.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    y, p = _as_arrays(labels, probabilities)
    if mode == "max":
        conf = np.maximum(p, 1.0 - p)
        hit = ((p >= DEFAULT_THRESHOLD).astype(np.int64) == y).astype(np.float64)
    elif mode == "positive":
        conf = p
        hit = y.astype(np.float64)
    else:
        raise ValueError(f"unknown ECE mode {mode!r}")
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    hit_sum = np.bincount(idx, weights=hit, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(count > 0, conf_sum / count, np.nan)
        acc = np.where(count > 0, hit_sum / count, np.nan)
    n = max(y.size, 1)
    used = count > 0
    value = float(np.sum(count[used] / n * np.abs(acc[used] - mean_conf[used])))
    bins = ReliabilityBins(edges[:-1], edges[1:], count, mean_conf, acc)
    return value, bins


def _ranked_counts(y: np.ndarray, p: np.ndarray):
    """Cumulative (tp, fp) after each distinct score, scanning scores high to low."""
    order = np.argsort(-p, kind="stable")
    ps, ys = p[order], y[order]
    last_of_group = np.r_[ps[1:] != ps[:-1], True]
    tp = np.cumsum(ys)[last_of_group]
    fp = np.cumsum(1 - ys)[last_of_group]
    return tp.astype(np.int64), fp.astype(np.int64)


def roc_curve(labels, probabilities) -> Curve:
    """ROC points from (0, 0) to (1, 1) with tied scores grouped; trapezoid AUC.

    The area is accumulated in integers, so it equals the Mann-Whitney
    concordance (ties count one half) exactly.
    """
    y, p = _as_arrays(labels, probabilities)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both classes present")
    tp, fp = _ranked_counts(y, p)
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return Curve(fp / n_neg, tp / n_pos, twice_area / (2 * n_pos * n_neg))


def pr_curve(labels, probabilities) -> Curve:
    """Precision-recall points by descending score; AP = sum (R_k - R_{k-1}) P_k."""
    y, p = _as_arrays(labels, probabilities)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DataError("precision-recall needs at least one positive")
    tp, fp = _ranked_counts(y, p)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    # correctly rounded sum of integer recall steps times precision, divided once,
    # so a perfect ranking gives exactly 1.0
    steps = np.diff(np.r_[0, tp])
    ap = math.fsum((steps * precision).tolist()) / n_pos
    return Curve(np.r_[0.0, recall], np.r_[1.0, precision], float(ap))


def evaluate(labels, probabilities, threshold: float = DEFAULT_THRESHOLD, n_bins: int = DEFAULT_BINS,
             ece_mode: str = "max") -> EvalReport:
    y, p = _as_arrays(labels, probabilities)
    if np.unique(y).size < 2:
        raise DataError("evaluation needs both classes present")
    counts = confusion(y, p, threshold)
    acc, f1, mcc = threshold_metrics(counts)
    ece_value, bins = ece(y, p, n_bins, ece_mode)
    return EvalReport(
        accuracy=acc,
        macro_f1=f1,
        mcc=mcc,
        brier=brier(y, p),
        log_loss=log_loss(y, p),
        ece=ece_value,
        confusion=counts,
        roc=roc_curve(y, p),
        pr=pr_curve(y, p),
        reliability=bins,
    )


def curve_csv(curve: Curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y"])
    for a, b in zip(curve.x, curve.y):
        w.writerow([repr(float(a)), repr(float(b))])
    return buf.getvalue()


def reliability_csv(bins: ReliabilityBins) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lower", "bin_upper", "count", "confidence", "accuracy"])
    for r in bins.rows():
        w.writerow(
            [
                repr(r["bin_lower"]),
                repr(r["bin_upper"]),
                r["count"],
                "" if r["confidence"] is None else repr(r["confidence"]),
                "" if r["accuracy"] is None else repr(r["accuracy"]),
            ]
        )
    return buf.getvalue()
