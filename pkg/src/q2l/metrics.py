"""Ranking (AP/mAP) and thresholded (OP/OR/OF1, CP/CR/CF1) multi-label metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class UndefinedAPError(ValueError):
    """Average precision requested for a category with no positives."""


def average_precision(scores, labels) -> float:
    """All-points AP: mean of precision@rank over every positive.

    Ranking is by descending score; ties keep sample order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedAPError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hit = np.arange(1, n_pos + 1) / ranks
    return float(precision_at_hit.mean())


@dataclass
class APReport:
    per_category: np.ndarray  # NaN where undefined
    mAP: float
    undefined: list[int] = field(default_factory=list)


def per_category_ap(probs, labels, mask=None) -> np.ndarray:
    """AP for each column; NaN for categories without positives.

    ``mask`` (N×K bool) restricts which (sample, category) pairs enter
    each category's ranking.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} must be matching N×K arrays")
    out = np.full(probs.shape[1], np.nan)
    for c in range(probs.shape[1]):
        rows = slice(None) if mask is None else np.asarray(mask[:, c], dtype=bool)
        try:
            out[c] = average_precision(probs[rows, c], labels[rows, c])
        except UndefinedAPError:
            pass
    return out


def mean_ap(per_category) -> float:
    """Arithmetic mean over defined (non-NaN) category APs."""
    ap = np.asarray(per_category, dtype=np.float64)
    defined = ap[~np.isnan(ap)]
    if defined.size == 0:
        raise ValueError("mAP undefined: no category has a defined AP")
    return float(defined.mean())


def ap_report(probs, labels, mask=None) -> APReport:
    ap = per_category_ap(probs, labels, mask)
    return APReport(ap, mean_ap(ap), [int(i) for i in np.flatnonzero(np.isnan(ap))])


@dataclass
class EvalCounters:
    correct: np.ndarray  # M_c per category
    predicted: np.ndarray  # M_p
    ground_truth: np.ndarray  # M_g

    def __post_init__(self):
        self.correct = np.asarray(self.correct, dtype=np.int64)
        self.predicted = np.asarray(self.predicted, dtype=np.int64)
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.int64)
        if not (self.correct.shape == self.predicted.shape == self.ground_truth.shape):
            raise ValueError("counter arrays must share one shape")
        if np.any(self.correct < 0) or np.any(self.correct > np.minimum(self.predicted, self.ground_truth)):
            raise ValueError("need 0 <= M_c <= min(M_p, M_g) for every category")

    @property
    def n_categories(self) -> int:
        return int(self.correct.size)


@dataclass
class ThresholdMetrics:
    OP: float
    OR: float
    OF1: float
    CP: float
    CR: float
    CF1: float
    counters: EvalCounters
    no_predictions: list[int] = field(default_factory=list)
    no_ground_truth: list[int] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("OP", "OR", "OF1", "CP", "CR", "CF1")}


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def metrics_from_counters(counters: EvalCounters) -> ThresholdMetrics:
    mc = counters.correct.astype(np.float64)
    mp = counters.predicted.astype(np.float64)
    mg = counters.ground_truth.astype(np.float64)
    op = mc.sum() / mp.sum() if mp.sum() > 0 else 0.0
    orr = mc.sum() / mg.sum() if mg.sum() > 0 else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        cp_each = np.where(mp > 0, mc / np.where(mp > 0, mp, 1), 0.0)
        cr_each = np.where(mg > 0, mc / np.where(mg > 0, mg, 1), 0.0)
    cp, cr = float(cp_each.mean()), float(cr_each.mean())
    return ThresholdMetrics(
        OP=float(op), OR=float(orr), OF1=_f1(float(op), float(orr)),
        CP=cp, CR=cr, CF1=_f1(cp, cr), counters=counters,
        no_predictions=[int(i) for i in np.flatnonzero(mp == 0)],
        no_ground_truth=[int(i) for i in np.flatnonzero(mg == 0)],
    )


def binarize(probs, threshold: float | None = 0.5, top_k: int | None = None) -> np.ndarray:
    """Positive iff ``p > threshold``, or the ``top_k`` highest per sample."""
    probs = np.asarray(probs, dtype=np.float64)
    if (threshold is None) == (top_k is None):
        raise ValueError("give exactly one of threshold or top_k")
    if top_k is not None:
        if not 1 <= top_k <= probs.shape[1]:
            raise ValueError(f"top_k must be in [1, {probs.shape[1]}], got {top_k}")
        order = np.argsort(-probs, axis=1, kind="stable")[:, :top_k]
        pred = np.zeros(probs.shape, dtype=bool)
        np.put_along_axis(pred, order, True, axis=1)
        return pred
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return probs > threshold


def threshold_metrics(probs, labels, threshold: float | None = 0.5, top_k: int | None = None) -> ThresholdMetrics:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} must be matching N×K arrays")
    if top_k is not None:
        threshold = None
    pred = binarize(probs, threshold, top_k)
    counters = EvalCounters(
        correct=(pred & labels).sum(axis=0),
        predicted=pred.sum(axis=0),
        ground_truth=labels.sum(axis=0),
    )
    return metrics_from_counters(counters)
