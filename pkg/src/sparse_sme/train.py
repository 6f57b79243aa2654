"""Multi-task objective, Adam, the training loop, and the experiment
harnesses (multi-seed averaging, single-task runs, expert-allocation
ablations, hyperparameter sweeps)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, SplitAssignment, TargetTransform, fit_target_transform
from .errors import ConfigError, NumericError, UnknownTaskError
from .metrics import TaskMetrics, evaluate_tasks
from .model import (
    Model,
    ModelConfig,
    backward,
    build_model,
    eligible_count,
    forward_batch,
    predict_batch,
    single_task_config,
)
from .numcore import ParamTape, Rng


@dataclass
class LossWeights:
    """Per-task loss coefficients; nonnegative with at least one positive."""

    weights: dict[str, float]

    def __post_init__(self):
        if not self.weights:
            raise ConfigError("loss weights must cover at least one task")
        if any(v < 0 for v in self.weights.values()):
            raise ConfigError("loss weights must be nonnegative")
        if not any(v > 0 for v in self.weights.values()):
            raise ConfigError("at least one loss weight must be positive")

    def __getitem__(self, task: str) -> float:
        try:
            return self.weights[task]
        except KeyError:
            raise UnknownTaskError(task) from None

    @classmethod
    def ones(cls, tasks) -> "LossWeights":
        return cls({t: 1.0 for t in tasks})


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    loss_weights: dict[str, float] | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle: str = "per_epoch"  # or "none"

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if not 0 < self.patience <= self.max_epochs:
            raise ConfigError("patience must lie in [1, max_epochs]")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.shuffle not in ("per_epoch", "none"):
            raise ConfigError(f"unknown shuffle policy {self.shuffle!r}")
        return self

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seeds": list(self.seeds),
            "loss_weights": None if self.loss_weights is None else dict(self.loss_weights),
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "shuffle": self.shuffle,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**payload).validate()


def multi_task_loss(predictions, targets, lam) -> float:
    """sum_t lam_t * mean_b (pred - target)^2 over aligned columns."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 2:
        raise ValueError(
            f"predictions {predictions.shape} and targets {targets.shape} must match"
        )
    if predictions.shape[0] == 0:
        raise ValueError("loss needs a nonempty batch")
    if lam.shape != (predictions.shape[1],):
        raise ValueError(f"{predictions.shape[1]} tasks but {lam.size} weights")
    if not (np.isfinite(predictions).all() and np.isfinite(targets).all()):
        raise NumericError("non-finite values in loss inputs")
    err = predictions - targets
    return float((lam * (err * err).mean(axis=0)).sum())


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_tape(cls, tape: ParamTape) -> "AdamState":
        return cls(m=np.zeros(len(tape)), v=np.zeros(len(tape)))


def adam_step(tape: ParamTape, state: AdamState, t: int, config: TrainConfig) -> None:
    """Standard bias-corrected Adam update, applied in place."""
    if t < 1:
        raise ValueError("adam step index starts at 1")
    g = tape.grads
    if not np.isfinite(g).all():
        idx = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NumericError(f"non-finite gradient in slice {tape.name_at(idx)!r}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1**t)
    v_hat = state.v / (1.0 - b2**t)
    tape.values -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    state.t = t


@dataclass
class RunHistory:
    train_loss: list[float]
    val_metrics: list[TaskMetrics]
    best_epoch: int
    wall_seconds: float


@dataclass
class TrainResult:
    history: RunHistory
    transform: TargetTransform
    model: Model  # holds the best-epoch parameter snapshot


def _model_targets(dataset: Dataset, transform: TargetTransform, tasks) -> np.ndarray:
    """Transformed target columns aligned with the model's active tasks."""
    cols = []
    for task in tasks:
        if task not in dataset.task_names:
            raise UnknownTaskError(task)
        cols.append(dataset.task_names.index(task))
    return transform.apply(dataset.labels_matrix())[:, cols]


def evaluate(
    model: Model,
    dataset: Dataset,
    indices,
    transform: TargetTransform,
    raw_space: bool = False,
) -> TaskMetrics:
    """Score the model on a subset of the dataset.

    Metrics are computed in transformed target space unless `raw_space`,
    which inverts the transform on both sides first.
    """
    tasks = model.config.active_tasks
    records = [dataset.records[i] for i in indices]
    if not records:
        raise ValueError("cannot evaluate on an empty split")
    preds = predict_batch(model, records)
    truth = _model_targets(dataset, transform, tasks)[np.asarray(indices, dtype=np.intp)]
    if raw_space:
        cols = [dataset.task_names.index(t) for t in tasks]
        full_pred = np.zeros((preds.shape[0], dataset.n_tasks))
        full_pred[:, cols] = preds
        preds = transform.invert(full_pred)[:, cols]
        truth = np.stack([dataset.records[i].labels for i in indices])[:, cols]
    return evaluate_tasks(tasks, truth, preds)


def train(
    model: Model,
    dataset: Dataset,
    split: SplitAssignment,
    config: TrainConfig,
    shuffle_seed: int = 0,
) -> TrainResult:
    """Seeded mini-batch training with early stopping on validation average
    R2; leaves the best-epoch snapshot in the model."""
    config.validate()
    if not split.train:
        raise ValueError("training split is empty")
    tasks = model.config.active_tasks
    transform = dataset.target_transform or fit_target_transform(dataset, split.train)
    targets = _model_targets(dataset, transform, tasks)
    lam = LossWeights(config.loss_weights or {t: 1.0 for t in tasks})
    for task in tasks:
        lam[task]  # surface unknown-task errors before the first epoch

    tape = model.tape
    state = AdamState.for_tape(tape)
    shuffle_rng = Rng(shuffle_seed)
    train_idx = np.asarray(split.train, dtype=np.intp)
    n_train = train_idx.size

    history = RunHistory(train_loss=[], val_metrics=[], best_epoch=0, wall_seconds=0.0)
    best_score = -math.inf
    best_values = tape.values.copy()
    stale = 0
    step = 0
    started = time.perf_counter()

    for epoch in range(config.max_epochs):
        if config.shuffle == "per_epoch":
            order = train_idx[shuffle_rng.permutation(n_train)]
        else:
            order = train_idx
        epoch_loss = 0.0
        for lo in range(0, n_train, config.batch_size):
            batch = order[lo : lo + config.batch_size]
            records = [dataset.records[i] for i in batch]
            step += 1
            try:
                loss = backward(model, records, targets[batch], lam)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, step {step}: {exc}") from exc
            adam_step(tape, state, step, config)
            epoch_loss += loss * batch.size
        history.train_loss.append(epoch_loss / n_train)

        if split.val:
            metrics = evaluate(model, dataset, split.val, transform)
            history.val_metrics.append(metrics)
            score = metrics.avg_r2
            if math.isnan(score):
                score = -math.inf
            if score > best_score:
                best_score = score
                best_values = tape.values.copy()
                history.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        else:
            best_values = tape.values.copy()
            history.best_epoch = epoch

    tape.values[:] = best_values
    history.wall_seconds = time.perf_counter() - started
    return TrainResult(history=history, transform=transform, model=model)


# ---------------------------------------------------------------------------
# harnesses


def region_capacity(dataset: Dataset) -> int:
    return max(rec.region_index for rec in dataset.records) + 1


def run_one(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    split: SplitAssignment,
    seed: int,
) -> TrainResult:
    model = build_model(model_config, region_capacity(dataset), Rng(seed))
    return train(model, dataset, split, train_config, shuffle_seed=seed)


@dataclass
class MultiSeedResult:
    mean: TaskMetrics
    std: TaskMetrics
    per_seed: list[TaskMetrics]
    results: list[TrainResult]


def _metrics_mean_std(runs: list[TaskMetrics]) -> tuple[TaskMetrics, TaskMetrics]:
    names = runs[0].task_names
    stack = {
        key: np.array([getattr(r, key) for r in runs]) for key in ("r2", "rmse", "mae")
    }
    mean = TaskMetrics(names, *[stack[k].mean(axis=0).tolist() for k in ("r2", "rmse", "mae")])
    std = TaskMetrics(names, *[stack[k].std(axis=0).tolist() for k in ("r2", "rmse", "mae")])
    return mean, std


def run_multi_seed(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    split: SplitAssignment,
    eval_split: str = "test",
) -> MultiSeedResult:
    """Train once per seed on a fixed split, then average the metrics."""
    results = []
    per_seed = []
    for seed in train_config.seeds:
        result = run_one(dataset, model_config, train_config, split, seed)
        indices = split.indices(eval_split)
        per_seed.append(evaluate(result.model, dataset, indices, result.transform))
        results.append(result)
    mean, std = _metrics_mean_std(per_seed)
    return MultiSeedResult(mean=mean, std=std, per_seed=per_seed, results=results)


def run_single_task(
    dataset: Dataset,
    task: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    split: SplitAssignment,
    eval_split: str = "test",
) -> MultiSeedResult:
    """Single-task variant: same expert budget folded into one task's pool."""
    return run_multi_seed(
        dataset, single_task_config(model_config, task), train_config, split, eval_split
    )


@dataclass(frozen=True)
class AblationRow:
    """Expert allocation (N_sp per task, N_sh, N_dt per pair)."""

    n_specific: int
    n_shared: int
    n_dual: int

    def label(self) -> str:
        return f"sp{self.n_specific}-sh{self.n_shared}-dt{self.n_dual}"


# Allocation table used by the expert-type ablation: every row keeps the
# per-task budget at 16 eligible experts.
REFERENCE_ALLOCATIONS = [
    AblationRow(16, 0, 0),
    AblationRow(0, 16, 0),
    AblationRow(0, 0, 8),
    AblationRow(8, 8, 0),
    AblationRow(8, 0, 4),
    AblationRow(0, 8, 4),
    AblationRow(8, 4, 2),
]

EPSILON_SWEEP_DEFAULT = [0.0, 0.01, 0.02, 0.03, 0.04]
REGION_DIM_SWEEP_DEFAULT = [2, 4, 6, 8, 10]


def check_allocation_budget(rows, n_tasks: int, budget: int) -> None:
    for i, row in enumerate(rows):
        m = row.n_specific + (n_tasks - 1) * row.n_dual + row.n_shared
        if m != budget:
            raise ConfigError(
                f"allocation row {i} ({row.label()}) gives {m} eligible experts "
                f"per task, expected {budget}"
            )


@dataclass
class AblationResult:
    row: AblationRow
    metrics: TaskMetrics


def run_ablation(
    dataset: Dataset,
    rows,
    model_config: ModelConfig,
    train_config: TrainConfig,
    split: SplitAssignment,
    eval_split: str = "test",
) -> list[AblationResult]:
    """One row per expert allocation, each holding the same per-task budget."""
    rows = list(rows)
    budget = eligible_count(model_config)
    check_allocation_budget(rows, len(model_config.tasks), budget)
    out = []
    for row in rows:
        cfg = replace(
            model_config,
            n_specific=row.n_specific,
            n_shared=row.n_shared,
            n_dual=row.n_dual,
        )
        result = run_multi_seed(dataset, cfg, train_config, split, eval_split)
        out.append(AblationResult(row=row, metrics=result.mean))
    return out


def mean_active_counts(model: Model, dataset: Dataset, indices) -> dict[str, float]:
    """Mean number of retained gates per task, averaged over records and
    both branches."""
    records = [dataset.records[i] for i in indices]
    state = forward_batch(model, records)
    counts = {}
    for task in model.config.active_tasks:
        per_branch = [
            (bs.masked[task] > 0).sum(axis=1).mean() for bs in state.branches.values()
        ]
        counts[task] = float(np.mean(per_branch))
    return counts


@dataclass
class SweepPoint:
    value: float
    metrics: TaskMetrics
    active_counts: dict[str, float]


_SWEEP_AXES = {"epsilon": "epsilon", "d_r": "d_r"}


def run_sweep(
    dataset: Dataset,
    axis: str,
    values,
    model_config: ModelConfig,
    train_config: TrainConfig,
    split: SplitAssignment,
    eval_split: str = "test",
) -> list[SweepPoint]:
    """Train one model per axis value; reports metrics plus gate-activation
    statistics on the evaluation split."""
    if axis not in _SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(_SWEEP_AXES)}")
    points = []
    for value in values:
        cfg = replace(model_config, **{_SWEEP_AXES[axis]: value})
        cfg.validate()
        result = run_multi_seed(dataset, cfg, train_config, split, eval_split)
        indices = split.indices(eval_split)
        counts_per_seed = [
            mean_active_counts(r.model, dataset, indices) for r in result.results
        ]
        counts = {
            task: float(np.mean([c[task] for c in counts_per_seed]))
            for task in cfg.active_tasks
        }
        points.append(SweepPoint(value=value, metrics=result.mean, active_counts=counts))
    return points
