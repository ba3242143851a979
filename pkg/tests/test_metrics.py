import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedsynth.metrics import ScoredSet, UndefinedAUC, accuracy, roc_auc


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = 0.0
    for p in pos:
        for n in neg:
            credit += 1.0 if p > n else 0.5 if p == n else 0.0
    return credit / (len(pos) * len(neg))


def test_accuracy_examples():
    assert accuracy(ScoredSet([0.9, 0.1], [1, 0])) == 1.0
    assert accuracy(ScoredSet([0.9, 0.9], [1, 0])) == 0.5


def test_threshold_rule_is_inclusive():
    assert accuracy(ScoredSet([0.5, 0.5, 0.5], [1, 1, 0])) == pytest.approx(2 / 3)


@pytest.mark.parametrize("seed", range(10))
def test_accuracy_matches_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    scores, labels = rng.random(100), rng.integers(0, 2, 100)
    hits = sum(1 for s, y in zip(scores, labels) if (1 if s >= 0.5 else 0) == y)
    assert accuracy(ScoredSet(scores, labels)) == hits / 100


def test_auc_examples():
    assert roc_auc(ScoredSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
    assert roc_auc(ScoredSet([0.3] * 6, [0, 1, 0, 1, 1, 0])) == 0.5


def test_auc_single_class_is_an_error():
    with pytest.raises(UndefinedAUC):
        roc_auc(ScoredSet([0.1, 0.2], [1, 1]))


def test_scored_set_invariants():
    with pytest.raises(ValueError):
        ScoredSet([0.1], [1, 0])
    with pytest.raises(ValueError):
        ScoredSet([], [])


@pytest.mark.parametrize("seed", range(20))
def test_auc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    scores = rng.random(50)
    if seed % 2:
        scores = np.round(scores, 1)  # force ties
    labels = rng.integers(0, 2, 50)
    labels[:2] = [0, 1]
    assert abs(roc_auc(ScoredSet(scores, labels)) - brute_force_auc(scores, labels)) < 1e-12


scored = st.lists(st.tuples(st.integers(-500, 500).map(lambda v: v / 100), st.integers(0, 1)), min_size=2, max_size=40).filter(
    lambda xs: len({y for _, y in xs}) == 2
)


@given(scored)
def test_auc_monotone_invariance(pairs):
    s = np.array([p for p, _ in pairs])
    y = [l for _, l in pairs]
    base = roc_auc(ScoredSet(s, y))
    assert roc_auc(ScoredSet(2 * s + 1, y)) == base
    assert roc_auc(ScoredSet(s**3, y)) == base


@given(scored)
def test_auc_complement_without_ties(pairs):
    s = np.array([p for p, _ in pairs])
    if len(np.unique(s)) != len(s):
        return
    y = [l for _, l in pairs]
    assert roc_auc(ScoredSet(s, y)) + roc_auc(ScoredSet(-s, y)) == pytest.approx(1.0, abs=1e-15)
    assert 0.0 <= roc_auc(ScoredSet(s, y)) <= 1.0
