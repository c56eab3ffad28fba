"""Regression and classification metrics, ROC analysis and paired tests."""
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm, rankdata

PH_THRESHOLD = 25.0
STRATEGIES = ("youden", "f1", "closest01", "concordance")
EXACT_MAX_N = 25


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class RegressionMetrics:
    mae: float
    rmse: float
    mse: float
    r2: float

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ConfusionMetrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def sensitivity(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else math.nan

    @property
    def specificity(self):
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else math.nan

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.n if self.n else math.nan

    @property
    def f1(self):
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def as_dict(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "sensitivity": self.sensitivity, "specificity": self.specificity,
                "accuracy": self.accuracy}


@dataclass(frozen=True)
class RocCurve:
    """ROC points ordered from the +inf threshold (0, 0) to -inf (1, 1)."""
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _pair(measured, predicted):
    a = np.asarray(measured, dtype=np.float64).ravel()
    b = np.asarray(predicted, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricsError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def regression_metrics(measured, predicted):
    y, f = _pair(measured, predicted)
    if y.size == 0:
        raise MetricsError("no samples")
    err = f - y
    mse = float(np.mean(err * err))
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        raise MetricsError("r2 undefined for a constant measured vector")
    return RegressionMetrics(mae=float(np.mean(np.abs(err))), rmse=math.sqrt(mse), mse=mse,
                             r2=1.0 - float(np.sum(err * err)) / sst)


def confusion_from_labels(labels, predicted_labels):
    y, p = _pair(labels, predicted_labels)
    y, p = y.astype(bool), p.astype(bool)
    return ConfusionMetrics(tp=int(np.sum(y & p)), fp=int(np.sum(~y & p)),
                            tn=int(np.sum(~y & ~p)), fn=int(np.sum(y & ~p)))


def confusion_at(measured, predicted, threshold=PH_THRESHOLD):
    """Label both vectors by value >= threshold and count agreement."""
    y, f = _pair(measured, predicted)
    return confusion_from_labels(y >= threshold, f >= threshold)


def _check_binary(labels, scores):
    y, s = _pair(labels, scores)
    if not np.all((y == 0) | (y == 1)):
        raise MetricsError("labels must be 0/1")
    if not np.all(np.isfinite(s)):
        raise MetricsError("scores must be finite")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise MetricsError("both classes are required")
    return y, s


def roc_curve(labels, scores):
    """Threshold sweep over distinct scores; a sample is positive when score >= threshold.

    Thresholds are +inf, midpoints between consecutive distinct scores, and
    -inf. Tied scores move together, so the trapezoid AUC equals the pairwise
    concordance with half credit for ties.
    """
    y, s = _check_binary(labels, scores)
    distinct = np.unique(s)[::-1]
    mids = 0.5 * (distinct[:-1] + distinct[1:])
    thresholds = np.concatenate(([np.inf], mids, [-np.inf]))
    # cumulative class counts at or above each distinct score
    idx = np.searchsorted(-distinct, -s)
    pos = np.bincount(idx, weights=y, minlength=distinct.size)
    neg = np.bincount(idx, weights=~y, minlength=distinct.size)
    tp = np.concatenate(([0.0], np.cumsum(pos)))
    fp = np.concatenate(([0.0], np.cumsum(neg)))
    tpr, fpr = tp / tp[-1], fp / fp[-1]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def auc_score(labels, scores):
    return roc_curve(labels, scores).auc


def strategy_objective(strategy, confusion):
    """Score to maximise; closest01 is negated distance so larger is better."""
    sens, spec = confusion.sensitivity, confusion.specificity
    if strategy == "youden":
        return sens + spec
    if strategy == "f1":
        return confusion.f1
    if strategy == "closest01":
        return -math.hypot(1.0 - sens, 1.0 - spec)
    if strategy == "concordance":
        return sens * spec
    raise MetricsError(f"unknown threshold strategy {strategy!r}; expected one of {STRATEGIES}")


def select_threshold(curve, labels, scores, strategy):
    """Best candidate threshold of ``curve`` under ``strategy``.

    Ties go to the higher sensitivity, then to the lower threshold.
    Returns (threshold, ConfusionMetrics).
    """
    if strategy not in STRATEGIES:
        raise MetricsError(f"unknown threshold strategy {strategy!r}; expected one of {STRATEGIES}")
    y, s = _check_binary(labels, scores)
    best = None
    for thr in curve.thresholds:
        cm = confusion_from_labels(y, s >= thr)
        key = (strategy_objective(strategy, cm), cm.sensitivity, -thr)
        if best is None or key > best[0]:
            best = (key, float(thr), cm)
    return best[1], best[2]


def _signed_rank_exact_cdf(doubled_ranks):
    # distribution of the doubled positive-rank sum under random signs
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts / counts.sum()


def paired_error_test(errors_a, errors_b):
    """Two-sided Wilcoxon signed-rank test on paired differences a - b.

    Zero differences are dropped. Exact null distribution for up to 25
    non-zero pairs (midranks handled on a doubled integer grid), otherwise the
    normal approximation with tie-corrected variance.
    """
    a, b = _pair(errors_a, errors_b)
    if a.size < 6:
        raise MetricsError("paired test needs at least 6 pairs")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        pmf = _signed_rank_exact_cdf(doubled)
        w2 = int(round(2.0 * w_plus))
        lower = pmf[:w2 + 1].sum()
        upper = pmf[w2:].sum()
        return float(min(1.0, 2.0 * min(lower, upper)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    if var <= 0.0:
        return 1.0
    z = (w_plus - mean) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(abs(z))))
