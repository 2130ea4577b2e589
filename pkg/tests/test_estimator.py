import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mlcsim.estimator import MultilevelLatentClassRegression


def make_grouped_sample(seed=0, n_groups=8, per_group=40, gap=2.0):
    rng = np.random.default_rng(seed)
    groups = np.repeat(np.arange(n_groups), per_group)
    levels = np.where(np.arange(n_groups) % 2 == 0, 0.0, gap)
    X = rng.normal(size=(groups.size, 2))
    slopes = np.array([0.5, -0.3])
    y = levels[groups] + X @ slopes + rng.normal(0, 0.4, groups.size)
    return X, y, groups


def test_get_params_round_trip_and_clone():
    est = MultilevelLatentClassRegression(n_trust_classes=3, n_restarts=4, random_state=7)
    params = est.get_params()
    assert params["n_trust_classes"] == 3
    cloned = clone(est)
    assert cloned.get_params() == params


def test_not_fitted_raises():
    est = MultilevelLatentClassRegression()
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((2, 2)), groups=[0, 1])


def test_fit_sets_attributes():
    X, y, groups = make_grouped_sample()
    est = MultilevelLatentClassRegression(n_restarts=4, random_state=1).fit(X, y, groups)
    assert est.posteriors_.shape == (8, 2)
    assert est.coef_.shape == (2,)
    assert est.intercepts_.shape == (2, 1)
    assert est.sigma2_ > 0
    assert np.isfinite(est.loglik_)
    assert np.allclose(est.posteriors_.sum(axis=1), 1.0, atol=1e-10)


def test_predict_tracks_outcome():
    X, y, groups = make_grouped_sample(seed=3)
    est = MultilevelLatentClassRegression(n_restarts=4, random_state=2).fit(X, y, groups)
    pred = est.predict(X, groups)
    assert pred.shape == y.shape
    assert np.corrcoef(pred, y)[0, 1] > 0.9


def test_score_is_mean_loglik():
    X, y, groups = make_grouped_sample(seed=4)
    est = MultilevelLatentClassRegression(n_restarts=4, random_state=3).fit(X, y, groups)
    score = est.score(X, y, groups)
    assert score == pytest.approx(est.loglik_ / y.shape[0], rel=1e-9)


def test_string_group_labels():
    X, y, groups = make_grouped_sample(seed=5)
    named = np.array([f"trust-{g}" for g in groups])
    est = MultilevelLatentClassRegression(n_restarts=3, random_state=4).fit(X, y, named)
    assert est.posteriors_.shape[0] == 8
    pred = est.predict(X, named)
    assert pred.shape == y.shape


def test_mismatched_groups_rejected():
    X, y, groups = make_grouped_sample()
    with pytest.raises(ValueError):
        MultilevelLatentClassRegression().fit(X, y, groups[:-1])


def test_random_state_determinism():
    X, y, groups = make_grouped_sample(seed=6)
    a = MultilevelLatentClassRegression(n_restarts=4, random_state=9).fit(X, y, groups)
    b = MultilevelLatentClassRegression(n_restarts=4, random_state=9).fit(X, y, groups)
    assert a.loglik_ == b.loglik_
    assert np.array_equal(a.posteriors_, b.posteriors_)
