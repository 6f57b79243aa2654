"""Regression metrics (R2, RMSE, MAE) and cross-task averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


def _paired(y, y_hat, min_len: int):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ShapeError(f"metric inputs differ in length: {y.size} vs {y_hat.size}")
    if y.size < min_len:
        raise ShapeError(f"metric needs at least {min_len} samples, got {y.size}")
    return y, y_hat


def r2(y, y_hat) -> float:
    """1 - SS_res / SS_tot about the mean of y.

    Returns NaN (the flagged undefined value) when y has zero variance.
    """
    y, y_hat = _paired(y, y_hat, min_len=2)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return math.nan
    ss_res = float(((y - y_hat) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def rmse(y, y_hat) -> float:
    y, y_hat = _paired(y, y_hat, min_len=1)
    return math.sqrt(float(((y - y_hat) ** 2).mean()))


def mae(y, y_hat) -> float:
    y, y_hat = _paired(y, y_hat, min_len=1)
    return float(np.abs(y - y_hat).mean())


@dataclass
class TaskMetrics:
    """Per-task R2/RMSE/MAE plus their unweighted cross-task means."""

    task_names: list[str]
    r2: list[float]
    rmse: list[float]
    mae: list[float]
    avg_r2: float = field(init=False)
    avg_rmse: float = field(init=False)
    avg_mae: float = field(init=False)

    def __post_init__(self):
        n = len(self.task_names)
        if n < 1:
            raise ValueError("TaskMetrics needs at least one task")
        if not (len(self.r2) == len(self.rmse) == len(self.mae) == n):
            raise ShapeError("per-task metric lists must match the task list")
        self.avg_r2 = sum(self.r2) / n
        self.avg_rmse = sum(self.rmse) / n
        self.avg_mae = sum(self.mae) / n

    def for_task(self, name: str) -> dict[str, float]:
        i = self.task_names.index(name)
        return {"r2": self.r2[i], "rmse": self.rmse[i], "mae": self.mae[i]}


def evaluate_tasks(task_names, y_true, y_pred) -> TaskMetrics:
    """Score a (n_samples, n_tasks) prediction block task by task."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 2:
        raise ShapeError(
            f"expected matching 2-D blocks, got {y_true.shape} vs {y_pred.shape}"
        )
    if y_true.shape[1] != len(task_names):
        raise ShapeError(
            f"{len(task_names)} tasks but {y_true.shape[1]} target columns"
        )
    return TaskMetrics(
        task_names=list(task_names),
        r2=[r2(y_true[:, t], y_pred[:, t]) for t in range(len(task_names))],
        rmse=[rmse(y_true[:, t], y_pred[:, t]) for t in range(len(task_names))],
        mae=[mae(y_true[:, t], y_pred[:, t]) for t in range(len(task_names))],
    )


def aggregate(per_task: list[dict[str, float]], task_names=None) -> TaskMetrics:
    """Assemble a TaskMetrics from per-task {r2, rmse, mae} dicts."""
    if not per_task:
        raise ValueError("aggregate needs at least one task entry")
    names = list(task_names) if task_names else [f"task_{i}" for i in range(len(per_task))]
    return TaskMetrics(
        task_names=names,
        r2=[m["r2"] for m in per_task],
        rmse=[m["rmse"] for m in per_task],
        mae=[m["mae"] for m in per_task],
    )
