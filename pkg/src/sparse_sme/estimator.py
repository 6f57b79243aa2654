"""Estimator-protocol wrapper around the functional training pipeline.

`SparseMoERegressor` follows the scikit-learn convention (constructor holds
hyperparameters, `fit`/`predict`/`score`, `get_params`/`set_params`) without
importing scikit-learn, so it composes with tools that duck-type the
protocol (clone, grid search, pipelines operating on plain arrays).

The design matrix mirrors the csv column layout:

    [region_id, img_0..img_{d_e-1}, txt_0..txt_{d_e-1}, poi_0..poi_{C-1}]

Region embeddings are a transductive lookup: predictions are only defined
for region ids that were present in `fit`.
"""

from __future__ import annotations

import math

import numpy as np

from .data import Dataset, RegionRecord, SplitAssignment
from .errors import DataError, ShapeError
from .metrics import r2 as r2_score
from .model import ModelConfig, build_model, predict_batch
from .numcore import Rng
from .train import TrainConfig, train


def check_feature_matrix(X, d_e: int, poi_categories: int) -> np.ndarray:
    """Validate the [region_id | image | text | poi] design matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"X must be 2-D, got ndim={X.ndim}")
    expected = 1 + 2 * d_e + poi_categories
    if X.shape[1] != expected:
        raise ShapeError(
            f"X has {X.shape[1]} columns, expected {expected} "
            f"(region_id + 2*{d_e} features + {poi_categories} poi counts)"
        )
    if not np.isfinite(X).all():
        raise DataError("X contains non-finite values")
    ids = X[:, 0]
    if ((ids < 0) | (ids != np.round(ids))).any():
        raise DataError("region ids (column 0) must be nonnegative integers")
    if (X[:, 1 + 2 * d_e :] < 0).any():
        raise DataError("poi counts must be nonnegative")
    return X


def check_targets(y, n_rows: int) -> np.ndarray:
    """Validate targets; promotes a 1-D vector to one task column."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != n_rows:
        raise ShapeError(f"y must be (n_samples, n_tasks) with n_samples={n_rows}")
    if not np.isfinite(y).all():
        raise DataError("y contains non-finite values")
    return y


def _records_from_arrays(X, y, d_e, poi_categories) -> list[RegionRecord]:
    records = []
    for i in range(X.shape[0]):
        records.append(
            RegionRecord(
                region_index=int(X[i, 0]),
                image_feat=X[i, 1 : 1 + d_e],
                text_feat=X[i, 1 + d_e : 1 + 2 * d_e],
                poi_counts=X[i, 1 + 2 * d_e :],
                labels=y[i],
            )
        )
    return records


class SparseMoERegressor:
    """Multi-task regressor over a three-tier sparse expert pool.

    Parameters
    ----------
    d_e : width of each precomputed image/text feature block in X.
    poi_categories : number of raw POI count columns in X.
    n_specific, n_dual, n_shared : experts per task / per task pair / shared.
    d_r, d_p : region embedding and projected POI embedding sizes.
    epsilon : gate threshold; weights at or below it are zeroed.
    target_transform : "none" or "log1p", applied with a z-score fitted on
        the training portion.
    validation_fraction : held-out share used for early stopping (0 disables).
    """

    _PARAMS = [
        "d_e", "poi_categories", "task_names",
        "n_specific", "n_dual", "n_shared",
        "d_r", "d_p", "expert_hidden", "expert_out", "head_hidden",
        "epsilon", "activation", "sigma", "fallback", "target_transform",
        "learning_rate", "batch_size", "max_epochs", "patience",
        "validation_fraction", "seed",
    ]

    def __init__(
        self,
        d_e: int = 16,
        poi_categories: int = 15,
        task_names=None,
        n_specific: int = 8,
        n_dual: int = 2,
        n_shared: int = 4,
        d_r: int = 6,
        d_p: int = 15,
        expert_hidden: int = 64,
        expert_out: int = 32,
        head_hidden: int = 64,
        epsilon: float = 0.01,
        activation: str = "relu",
        sigma: str = "layer_norm",
        fallback: str = "top1",
        target_transform: str = "none",
        learning_rate: float = 3e-4,
        batch_size: int = 64,
        max_epochs: int = 200,
        patience: int = 20,
        validation_fraction: float = 0.2,
        seed: int = 0,
    ):
        self.d_e = d_e
        self.poi_categories = poi_categories
        self.task_names = task_names
        self.n_specific = n_specific
        self.n_dual = n_dual
        self.n_shared = n_shared
        self.d_r = d_r
        self.d_p = d_p
        self.expert_hidden = expert_hidden
        self.expert_out = expert_out
        self.head_hidden = head_hidden
        self.epsilon = epsilon
        self.activation = activation
        self.sigma = sigma
        self.fallback = fallback
        self.target_transform = target_transform
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.seed = seed

    # -- sklearn protocol ---------------------------------------------------

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAMS}

    def set_params(self, **params) -> "SparseMoERegressor":
        for name, value in params.items():
            if name not in self._PARAMS:
                raise ValueError(f"invalid parameter {name!r} for SparseMoERegressor")
            setattr(self, name, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={getattr(self, k)!r}" for k in self._PARAMS)
        return f"SparseMoERegressor({args})"

    # -- fitting ------------------------------------------------------------

    def _model_config(self, tasks) -> ModelConfig:
        return ModelConfig(
            d_e=self.d_e,
            d_r=self.d_r,
            d_p=self.d_p,
            poi_categories=self.poi_categories,
            tasks=list(tasks),
            n_specific=self.n_specific,
            n_dual=self.n_dual,
            n_shared=self.n_shared,
            expert_hidden=self.expert_hidden,
            expert_out=self.expert_out,
            head_hidden=self.head_hidden,
            epsilon=self.epsilon,
            activation=self.activation,
            sigma=self.sigma,
            fallback=self.fallback,
        ).validate()

    def fit(self, X, y) -> "SparseMoERegressor":
        X = check_feature_matrix(X, self.d_e, self.poi_categories)
        y = check_targets(y, X.shape[0])
        n, n_tasks = y.shape
        if n < 2:
            raise ValueError("fit needs at least 2 samples")
        tasks = list(self.task_names) if self.task_names else [f"task_{i}" for i in range(n_tasks)]
        if len(tasks) != n_tasks:
            raise ShapeError(f"{len(tasks)} task names but y has {n_tasks} columns")

        dataset = Dataset(
            name="fit",
            d_e=self.d_e,
            poi_categories=self.poi_categories,
            task_names=tasks,
            records=_records_from_arrays(X, y, self.d_e, self.poi_categories),
            transform_spec=[self.target_transform] * n_tasks,
        ).validate()

        perm = Rng(self.seed).permutation(n).tolist()
        n_val = int(math.floor(self.validation_fraction * n + 1e-9))
        split = SplitAssignment(train=perm[n_val:], val=perm[:n_val], test=[], seed=self.seed)
        if not split.train:
            raise ValueError("validation_fraction leaves no training samples")

        config = self._model_config(tasks)
        model = build_model(config, max(int(X[:, 0].max()) + 1, 1), Rng(self.seed))
        train_config = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=min(self.patience, self.max_epochs),
            seeds=[self.seed],
        )
        result = train(model, dataset, split, train_config, shuffle_seed=self.seed)

        self.model_ = result.model
        self.transform_ = result.transform
        self.history_ = result.history
        self.task_names_ = tasks
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this SparseMoERegressor instance is not fitted yet")

    def predict(self, X) -> np.ndarray:
        """Raw-space predictions, shape (n_samples, n_tasks)."""
        self._check_fitted()
        X = check_feature_matrix(X, self.d_e, self.poi_categories)
        zeros = np.zeros((X.shape[0], len(self.task_names_)))
        records = _records_from_arrays(X, zeros, self.d_e, self.poi_categories)
        preds = predict_batch(self.model_, records)
        return self.transform_.invert(preds)

    def score(self, X, y) -> float:
        """Unweighted mean R^2 across tasks, in raw target space."""
        self._check_fitted()
        y = check_targets(y, np.asarray(X).shape[0])
        preds = self.predict(X)
        return float(np.mean([r2_score(y[:, t], preds[:, t]) for t in range(y.shape[1])]))
