import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdbfm.errors import DegenerateLabels
from rdbfm.metrics import HIGHER_IS_BETTER, accuracy, auroc, evaluate_metric, logloss, mae, rmse


def _pairwise_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auroc_classic_fixture():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auroc_ties_count_half():
    assert auroc([0.5, 0.5], [0, 1]) == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=40))
def test_auroc_matches_pair_counting(pairs):
    scores = [s for s, _ in pairs]
    labels = [l for _, l in pairs]
    if all(labels) or not any(labels):
        with pytest.raises(DegenerateLabels):
            auroc(scores, labels)
        return
    assert auroc(scores, labels) == pytest.approx(_pairwise_auc(scores, labels))


def test_auroc_uses_positive_column_of_probabilities():
    probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.65, 0.35], [0.2, 0.8]])
    assert auroc(probs, [0, 0, 1, 1]) == pytest.approx(0.75)


def test_accuracy():
    assert accuracy([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5
    assert accuracy(np.array([[0.2, 0.8], [0.7, 0.3], [0.4, 0.6]]), [1, 0, 0]) == pytest.approx(2 / 3)


def test_regression_metrics():
    assert mae([1.0, 2.0, 4.0], [2.0, 2.0, 1.0]) == pytest.approx(4 / 3)
    assert rmse([1.0, 2.0, 4.0], [2.0, 2.0, 1.0]) == pytest.approx(math.sqrt(10 / 3))


def test_logloss():
    assert logloss([[0.25, 0.75], [0.5, 0.5]], [1, 0]) == pytest.approx(-(math.log(0.75) + math.log(0.5)) / 2)
    assert logloss([0.75], [1]) == pytest.approx(-math.log(0.75))
    assert np.isfinite(logloss([[1.0, 0.0]], [1]))


def test_dispatch():
    assert evaluate_metric("mae", [1.0], [3.0]) == 2.0
    with pytest.raises(ValueError):
        evaluate_metric("f1", [1], [1])
    with pytest.raises(ValueError):
        evaluate_metric("mae", [], [])
    assert HIGHER_IS_BETTER["auroc"] and not HIGHER_IS_BETTER["mae"]
