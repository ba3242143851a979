"""Accuracy and exact Mann-Whitney ROC AUC."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .classifier import classifier_with, predict

THRESHOLD = 0.5


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel()
        if scores.shape != labels.shape:
            raise ValueError(f"{scores.size} scores but {labels.size} labels")
        if scores.size == 0:
            raise ValueError("empty scored set")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))


class UndefinedAUC(ValueError):
    """AUC needs at least one positive and one negative sample."""


def accuracy(s: ScoredSet, threshold: float = THRESHOLD) -> float:
    """Fraction of samples where ``score >= threshold`` agrees with the label."""
    predicted = (s.scores >= threshold).astype(np.int64)
    return float(np.count_nonzero(predicted == s.labels)) / s.labels.size


def auc_fraction(s: ScoredSet) -> Fraction:
    """Exact AUC as a rational: (wins + ties/2) / (n_pos * n_neg)."""
    pos = s.scores[s.labels == 1]
    neg = np.sort(s.scores[s.labels == 0])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUC(f"AUC undefined with {pos.size} positives and {neg.size} negatives")
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    # doubled credit keeps everything integral
    twice_credit = int(below.sum()) * 2 + int((not_above - below).sum())
    return Fraction(twice_credit, 2 * pos.size * neg.size)


def roc_auc(s: ScoredSet) -> float:
    return float(auc_fraction(s))


def evaluate_model(params, shard, split_tag: str) -> tuple[float, float | None]:
    """(accuracy, AUC) of the classifier ``params`` on one split of ``shard``.

    AUC is ``None`` when the split holds a single class.
    """
    x, y = shard.arrays(split_tag)
    if len(y) == 0:
        raise ValueError(f"client {shard.client_id} has no {split_tag!r} images")
    s = ScoredSet(predict(classifier_with(params), x), y)
    try:
        auc = roc_auc(s)
    except UndefinedAUC:
        auc = None
    return accuracy(s), auc
