"""Binary classification metrics: accuracy, F1, ROC AUC and log loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import UndefinedMetricError, UsageError
from .model import EPS, forward

DEFAULT_THRESHOLD = 0.5


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.size == 0:
        raise UsageError("metrics need at least one sample")
    if s.shape != y.shape:
        raise UsageError(f"{s.size} scores but {y.size} labels")
    return s, y


def confusion(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """``[[TN, FP], [FN, TP]]`` with a sample predicted positive when score >= threshold."""
    s, y = _prepare(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return np.array([[tn, fp], [fn, tp]], dtype=np.int64)


def accuracy(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> float:
    s, y = _prepare(scores, labels)
    return float(np.mean((s >= threshold).astype(np.int64) == y))


def f1(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> float:
    (_, fp), (fn, tp) = confusion(scores, labels, threshold)
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties worth one half."""
    s, y = _prepare(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("ROC AUC needs both classes present")
    # sort negatives once; count strictly-lower and tied negatives per positive
    neg = np.sort(neg)
    lower = np.searchsorted(neg, pos, side="left")
    upper = np.searchsorted(neg, pos, side="right")
    wins = lower.sum() + 0.5 * (upper - lower).sum()
    return float(wins / (pos.size * neg.size))


def log_loss(scores, labels) -> float:
    s, y = _prepare(scores, labels)
    if np.any((s < 0) | (s > 1)):
        raise UsageError("log loss needs probabilities in [0, 1]")
    p = np.clip(s, EPS, 1.0 - EPS)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    f1: float
    roc_auc: float | None
    log_loss: float
    confusion: tuple[tuple[int, int], tuple[int, int]]
    sample_count: int

    def to_dict(self) -> dict:
        out = asdict(self)
        out["confusion"] = [list(row) for row in self.confusion]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        conf = tuple(tuple(int(v) for v in row) for row in d["confusion"])
        return cls(d["accuracy"], d["f1"], d["roc_auc"], d["log_loss"], conf, int(d["sample_count"]))


def metric_report(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> MetricReport:
    """All metrics from one score vector. AUC is None when only one class is present."""
    conf = confusion(scores, labels, threshold)
    try:
        auc = roc_auc(scores, labels)
    except UndefinedMetricError:
        auc = None
    return MetricReport(
        accuracy=accuracy(scores, labels, threshold),
        f1=f1(scores, labels, threshold),
        roc_auc=auc,
        log_loss=log_loss(scores, labels),
        confusion=tuple(tuple(int(v) for v in row) for row in conf),
        sample_count=int(conf.sum()),
    )


def evaluate(params, spec, data, adapters=None, personal_params=None) -> MetricReport:
    """Score ``data`` with one forward pass; personal layers are merged onto ``params``."""
    if personal_params is not None and len(personal_params):
        params = params.merge(personal_params)
    return metric_report(forward(params, spec, data.features, adapters), data.labels)
