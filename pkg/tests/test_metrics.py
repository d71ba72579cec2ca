import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frugalfl.errors import UndefinedMetricError, UsageError
from frugalfl.metrics import accuracy, confusion, evaluate, f1, log_loss, metric_report, roc_auc
from frugalfl.model import Dataset, ModelSpec, init_params

from oracles import naive_accuracy, naive_f1, naive_log_loss, trapezoid_auc


def test_accuracy_examples():
    assert accuracy([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
    assert accuracy([0.4] * 5, [1] * 5) == 0.0


def test_accuracy_matches_direct_count(rng):
    s, y = rng.random(10), rng.integers(0, 2, 10)
    assert accuracy(s, y) == naive_accuracy(s, y)


def test_f1_examples():
    assert f1([1, 0, 1], [1, 0, 1]) == 1.0
    assert f1([0.1, 0.2, 0.3], [1, 0, 1]) == 0.0
    # TP=2, FP=1, FN=1
    assert f1([0.9, 0.8, 0.7, 0.1], [1, 1, 0, 1]) == pytest.approx(2 / 3, abs=1e-15)


def test_roc_auc_examples():
    assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_auc_matches_trapezoid_with_ties(rng):
    s = rng.integers(0, 6, 50) / 5.0
    y = rng.integers(0, 2, 50)
    assert abs(roc_auc(s, y) - trapezoid_auc(s, y)) <= 1e-12


def test_roc_auc_agrees_with_sklearn(rng):
    sklearn_metrics = pytest.importorskip("sklearn.metrics")
    s, y = rng.random(80), rng.integers(0, 2, 80)
    assert roc_auc(s, y) == pytest.approx(sklearn_metrics.roc_auc_score(y, s), abs=1e-12)


def test_log_loss_examples():
    assert log_loss([0.5] * 4, [0, 1, 0, 1]) == pytest.approx(math.log(2), abs=1e-15)
    assert log_loss([1.0, 0.0], [1, 0]) < 1e-11
    with pytest.raises(UsageError):
        log_loss([1.5], [1])


def test_log_loss_matches_direct_summation(rng):
    s, y = rng.random(8), rng.integers(0, 2, 8)
    assert abs(log_loss(s, y) - naive_log_loss(s, y)) <= 1e-12


def test_empty_inputs_rejected():
    for fn in (accuracy, f1, log_loss):
        with pytest.raises(UsageError):
            fn([], [])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(4, 40))
def test_auc_invariant_under_increasing_transforms(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=n)
    y = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    base = roc_auc(s, y)
    assert roc_auc(np.exp(s), y) == pytest.approx(base, abs=1e-12)
    assert roc_auc(3.0 * s + 7.0, y) == pytest.approx(base, abs=1e-12)
    # continuous draws have no ties
    assert base + roc_auc(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_log_loss_minimised_at_positive_rate():
    y = np.array([1, 1, 1, 0, 0, 1, 0, 1])
    grid = np.linspace(0.01, 0.99, 99)
    best = grid[np.argmin([log_loss(np.full(y.size, p), y) for p in grid])]
    assert best == pytest.approx(y.mean(), abs=0.01)


def test_f1_bounds_and_balanced_perfect_case(rng):
    y = np.array([0, 1] * 10)
    assert f1(y.astype(float), y) == accuracy(y.astype(float), y) == 1.0
    for _ in range(20):
        assert 0.0 <= f1(rng.random(15), rng.integers(0, 2, 15)) <= 1.0


def test_metric_report_consistency(rng):
    s, y = rng.random(30), rng.integers(0, 2, 30)
    rep = metric_report(s, y)
    (tn, fp), (fn, tp) = rep.confusion
    assert tn + fp + fn + tp == rep.sample_count == 30
    assert rep.accuracy == (tp + tn) / 30
    assert rep.f1 == f1(s, y) and rep.roc_auc == roc_auc(s, y) and rep.log_loss == log_loss(s, y)
    np.testing.assert_array_equal(confusion(s, y), np.array(rep.confusion))


def test_metric_report_single_class_has_no_auc():
    assert metric_report([0.2, 0.7], [1, 1]).roc_auc is None


def test_evaluate_is_invariant_to_duplication(rng):
    spec = ModelSpec((3, 4, 1), head_boundary=1)
    params = init_params(spec, rng, "decoupled")
    data = Dataset(rng.normal(size=(12, 3)), rng.integers(0, 2, 12))
    shared, personal = params.select("shared"), params.select("personal")
    once = evaluate(shared, spec, data, personal_params=personal)
    twice = evaluate(shared, spec, Dataset.concat([data, data]), personal_params=personal)
    for field in ("accuracy", "f1", "roc_auc"):
        assert getattr(once, field) == getattr(twice, field)
    assert once.log_loss == pytest.approx(twice.log_loss, abs=1e-15)
    assert once == evaluate(params, spec, data)
