import math

import numpy as np
import pytest

from sparse_sme.errors import ShapeError
from sparse_sme.metrics import TaskMetrics, aggregate, evaluate_tasks, mae, r2, rmse


def test_r2_perfect_fit():
    y = [0.0, 1.0, 2.0]
    assert r2(y, y) == 1.0


def test_r2_mean_predictor_is_zero():
    y = np.array([1.0, 3.0, 5.0, 7.0])
    assert r2(y, np.full(4, y.mean())) == 0.0


def test_r2_hand_example():
    got = r2([0.0, 1.0, 2.0, 3.0], [0.5, 1.5, 1.5, 2.5])
    assert got == pytest.approx(0.8, abs=1e-12)


def test_r2_zero_variance_flagged():
    assert math.isnan(r2([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]))


def test_r2_length_mismatch():
    with pytest.raises(ShapeError):
        r2([1.0, 2.0], [1.0])


def test_rmse_mae_zero_on_exact():
    y = [1.0, -2.0, 3.0]
    assert rmse(y, y) == 0.0
    assert mae(y, y) == 0.0


def test_rmse_mae_hand_example():
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5), abs=1e-12)
    assert mae([0.0, 0.0], [3.0, 4.0]) == pytest.approx(3.5, abs=1e-12)


def test_residual_scaling_homogeneity():
    y = np.array([0.0, 1.0, 2.0, 3.0])
    y_hat = np.array([0.5, 0.7, 2.2, 3.3])
    c = -2.5
    scaled = y + c * (y_hat - y)
    assert rmse(y, scaled) == pytest.approx(abs(c) * rmse(y, y_hat), rel=1e-12)
    assert mae(y, scaled) == pytest.approx(abs(c) * mae(y, y_hat), rel=1e-12)


def test_rmse_at_least_mae():
    rng = np.random.default_rng(0)
    for _ in range(50):
        y = rng.normal(size=20)
        y_hat = rng.normal(size=20)
        assert rmse(y, y_hat) >= mae(y, y_hat) - 1e-15


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    y = rng.normal(size=30)
    y_hat = rng.normal(size=30)
    perm = rng.permutation(30)
    assert r2(y, y_hat) == pytest.approx(r2(y[perm], y_hat[perm]), rel=1e-12)
    assert rmse(y, y_hat) == pytest.approx(rmse(y[perm], y_hat[perm]), rel=1e-12)
    assert mae(y, y_hat) == pytest.approx(mae(y[perm], y_hat[perm]), rel=1e-12)


def test_aggregate_single_task():
    tm = aggregate([{"r2": 0.5, "rmse": 1.0, "mae": 0.7}], ["carbon"])
    assert tm.avg_r2 == 0.5 and tm.avg_rmse == 1.0 and tm.avg_mae == 0.7


def test_aggregate_hand_mean():
    rows = [{"r2": v, "rmse": 1.0, "mae": 1.0} for v in (0.2, 0.4, 0.6)]
    assert aggregate(rows).avg_r2 == pytest.approx(0.4, abs=1e-15)


def test_aggregate_permutation_invariant_mean():
    rows = [{"r2": v, "rmse": v, "mae": v} for v in (0.1, 0.9, 0.5)]
    fwd = aggregate(rows)
    rev = aggregate(rows[::-1])
    assert fwd.avg_r2 == pytest.approx(rev.avg_r2)


def test_aggregate_empty_rejected():
    with pytest.raises(ValueError):
        aggregate([])


def test_evaluate_tasks_block():
    y = np.array([[0.0, 1.0], [1.0, 2.0], [2.0, 4.0], [3.0, 8.0]])
    tm = evaluate_tasks(["a", "b"], y, y)
    assert tm.r2 == [1.0, 1.0]
    assert tm.for_task("b")["rmse"] == 0.0


def test_task_metrics_avg_fields():
    tm = TaskMetrics(["a", "b"], r2=[0.2, 0.6], rmse=[1.0, 3.0], mae=[0.5, 1.5])
    assert tm.avg_r2 == pytest.approx(0.4)
    assert tm.avg_rmse == pytest.approx(2.0)
    assert tm.avg_mae == pytest.approx(1.0)
