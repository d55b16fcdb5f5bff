import numpy as np
import pytest
from sklearn.base import clone

from kinform.estimator import KinshipVerifier, pack_pairs


def kin_rows(n, d=8, seed=0, kin_codes=(3, 5)):
    """Kin pairs share a noisy copy of one vector; non-kin pairs are independent."""
    rng = np.random.default_rng(seed)
    left = rng.normal(size=(n, d))
    y = rng.integers(0, 2, n)
    right = np.where(y[:, None] == 1, left + 0.3 * rng.normal(size=(n, d)), rng.normal(size=(n, d)))
    codes = rng.choice(kin_codes, n)
    return pack_pairs(codes, left, right), y


def small(**kw):
    base = dict(epochs=15, batch_size=16, embed_dim=8, channels=8, hidden_layers=2, seed=1)
    base.update(kw)
    return KinshipVerifier(**base)


def test_params_and_clone():
    est = small(alpha=0.5)
    params = est.get_params()
    assert params["alpha"] == 0.5 and params["hidden_layers"] == 2
    copy = clone(est)
    assert copy.get_params() == params and not hasattr(copy, "model_")


def test_pack_pairs_layout():
    X = pack_pairs(["FD", "ms"], np.ones((2, 3)), np.zeros((2, 3)))
    assert X.shape == (2, 7)
    assert X[:, 0].tolist() == [3.0, 6.0]
    assert X[0, 1:4].tolist() == [1.0] * 3 and X[0, 4:].tolist() == [0.0] * 3


@pytest.fixture(scope="module")
def fitted():
    X, y = kin_rows(400)
    return small().fit(X, y)


def test_fit_predict_learns(fitted):
    X, y = kin_rows(400, seed=1)
    proba = fitted.predict_proba(X)
    assert proba.shape == (400, 2) and np.allclose(proba.sum(axis=1), 1.0)
    assert fitted.score(X, y) > 0.75
    assert set(np.unique(fitted.predict(X))) <= {0, 1}


def test_fit_is_deterministic(fitted):
    X, y = kin_rows(400)
    again = small().fit(X, y)
    Xt, _ = kin_rows(50, seed=2)
    assert np.array_equal(again.predict_proba(Xt), fitted.predict_proba(Xt))


def test_unseen_class_rejected(fitted):
    X, _ = kin_rows(10, seed=3, kin_codes=(0,))
    with pytest.raises(ValueError, match="absent"):
        fitted.predict(X)


def test_feature_count_checked(fitted):
    with pytest.raises(ValueError, match="features"):
        fitted.predict(np.zeros((2, 9)))


@pytest.mark.parametrize("codes", [[7.0], [-1.0], [1.5]])
def test_bad_class_code(codes):
    X = pack_pairs([0], np.ones((1, 2)), np.ones((1, 2)))
    X[:, 0] = codes
    with pytest.raises(ValueError, match="class codes"):
        small().fit(X, [1])


def test_odd_width_and_labels():
    with pytest.raises(ValueError, match="equal-length"):
        small().fit(np.zeros((2, 4)), [0, 1])
    X, _ = kin_rows(4)
    with pytest.raises(ValueError, match="labels"):
        small().fit(X, [0, 1, 2, 1])


def test_unfitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        small().predict(np.zeros((1, 5)))
