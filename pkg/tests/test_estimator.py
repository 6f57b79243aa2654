import numpy as np
import pytest

from sparse_sme.data import gen_synthetic
from sparse_sme.errors import DataError, ShapeError, UnknownRegionError
from sparse_sme.estimator import SparseMoERegressor, check_feature_matrix, check_targets


def dataset_as_arrays(ds):
    X = np.stack(
        [
            np.concatenate([[r.region_index], r.image_feat, r.text_feat, r.poi_counts])
            for r in ds.records
        ]
    )
    y = ds.labels_matrix()
    return X, y


@pytest.fixture(scope="module")
def arrays():
    ds = gen_synthetic(80, d_e=6, poi_categories=4, latent_dim=4, seed=11)
    return dataset_as_arrays(ds)


def small_estimator(**overrides):
    base = dict(
        d_e=6, poi_categories=4, n_specific=2, n_dual=1, n_shared=1,
        d_r=2, d_p=3, expert_hidden=8, expert_out=4, head_hidden=8,
        max_epochs=15, patience=15, batch_size=16, learning_rate=3e-3, seed=0,
    )
    base.update(overrides)
    return SparseMoERegressor(**base)


def test_get_set_params_round_trip():
    est = small_estimator(epsilon=0.02)
    params = est.get_params()
    clone = SparseMoERegressor(**params)
    assert clone.get_params() == params
    est.set_params(epsilon=0.03, n_shared=2)
    assert est.epsilon == 0.03 and est.n_shared == 2
    with pytest.raises(ValueError):
        est.set_params(bogus=1)


def test_fit_predict_shapes_and_determinism(arrays):
    X, y = arrays
    est = small_estimator()
    est.fit(X, y)
    preds = est.predict(X)
    assert preds.shape == y.shape
    again = small_estimator().fit(X, y).predict(X)
    assert np.array_equal(preds, again)


def test_fit_learns_signal(arrays):
    X, y = arrays
    est = small_estimator(max_epochs=60, patience=60)
    est.fit(X, y)
    # in-sample fit should clearly beat the mean predictor
    assert est.score(X, y) > 0.3


def test_predict_before_fit_raises(arrays):
    X, _ = arrays
    with pytest.raises(RuntimeError):
        small_estimator().predict(X)


def test_predict_unseen_region_rejected(arrays):
    X, y = arrays
    est = small_estimator().fit(X, y)
    X_bad = X[:1].copy()
    X_bad[0, 0] = 10_000
    with pytest.raises(UnknownRegionError):
        est.predict(X_bad)


def test_single_task_vector_targets(arrays):
    X, y = arrays
    est = small_estimator(task_names=["carbon"])
    est.fit(X, y[:, 0])
    assert est.predict(X).shape == (X.shape[0], 1)
    assert est.task_names_ == ["carbon"]


def test_validation_helpers_reject_bad_input():
    with pytest.raises(ShapeError):
        check_feature_matrix(np.zeros((4, 3)), d_e=2, poi_categories=2)
    bad = np.zeros((2, 1 + 2 * 2 + 2))
    bad[0, 0] = -1
    with pytest.raises(DataError):
        check_feature_matrix(bad, d_e=2, poi_categories=2)
    nonint = np.zeros((2, 7))
    nonint[0, 0] = 0.5
    with pytest.raises(DataError):
        check_feature_matrix(nonint, d_e=2, poi_categories=2)
    with pytest.raises(DataError):
        check_targets(np.array([np.nan, 1.0]), 2)
    with pytest.raises(ShapeError):
        check_targets(np.zeros((3, 1)), 2)


def test_log1p_target_transform_round_trip(arrays):
    X, y = arrays
    y_pos = np.abs(y) + 0.5
    est = small_estimator(target_transform="log1p", max_epochs=5, patience=5)
    est.fit(X, y_pos)
    preds = est.predict(X)
    assert np.isfinite(preds).all()
    assert est.transform_.specs == ["log1p"] * 3
