"""Ranking and threshold metrics for fraud scores.

Fraud is the positive class throughout. AP is the rank-walk (uninterpolated)
average precision with ties kept in input order; AUC is the Mann-Whitney
statistic with ties counted as one half.
"""

from __future__ import annotations

from fractions import Fraction
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s, y


def average_precision(scores, labels) -> float:
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    # exact rational sum, rounded once, so the value does not depend on summation order
    total = sum((Fraction(k, int(r)) for k, r in enumerate(ranks, start=1)), Fraction(0))
    return float(total / n_pos)


def auc(scores, labels) -> float:
    s, y = _as_arrays(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = rankdata(s)  # average ranks, so ties contribute 1/2
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s, y = _as_arrays(scores, labels)
    if len(s) == 0:
        raise ValueError("accuracy of an empty prediction set")
    return int(((s >= threshold) == y).sum()) / len(s)


@dataclass
class MetricsReport:
    ap: float
    auc: float
    accuracy: float
    n_pos: int
    n_neg: int
    iteration: int = 0
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(scores, labels, iteration: int = 0, **meta) -> MetricsReport:
    s, y = _as_arrays(scores, labels)
    return MetricsReport(
        ap=average_precision(s, y),
        auc=auc(s, y),
        accuracy=accuracy(s, y),
        n_pos=int(y.sum()),
        n_neg=int((~y).sum()),
        iteration=iteration,
        meta=dict(meta, ap_variant="rank-walk, stable ties", threshold=0.5),
    )
