import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from infinet.data import as_arrays, synth_blobs
from infinet.estimator import InfiNetClassifier, check_images, check_labels


@pytest.fixture(scope="module")
def blobs():
    X, y = as_arrays(synth_blobs(3, 4, 16, 16, seed=0))
    return X, np.array(["cat", "dog", "owl"])[y]


def test_params_and_clone():
    clf = InfiNetClassifier(kind="hadamard", epochs=3)
    params = clf.get_params()
    assert params["kind"] == "hadamard" and params["epochs"] == 3 and params["variant"] == "micro"
    c2 = clone(clf).set_params(epochs=5)
    assert c2.epochs == 5 and clf.epochs == 3


def test_fit_predict(blobs):
    X, y = blobs
    clf = InfiNetClassifier(epochs=2, batch_size=4, seed=1).fit(X, y)
    assert list(clf.classes_) == ["cat", "dog", "owl"]
    assert clf.n_features_in_ == 16 * 16 * 3 and len(clf.history_) == 2
    pred = clf.predict(X)
    assert pred.shape == (12,) and set(pred) <= set(clf.classes_)
    proba = clf.predict_proba(X)
    assert proba.shape == (12, 3) and np.allclose(proba.sum(1), 1.0)
    assert np.array_equal(clf.classes_[proba.argmax(1)], pred)
    assert 0.0 <= clf.score(X, y) <= 1.0


def test_fit_is_deterministic(blobs):
    X, y = blobs
    a = InfiNetClassifier(epochs=1, batch_size=4, seed=2).fit(X, y).predict_proba(X)
    b = InfiNetClassifier(epochs=1, batch_size=4, seed=2).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_demo_variant(blobs):
    X, y = blobs
    clf = InfiNetClassifier(variant="demo", width=4, epochs=1, batch_size=6).fit(X, y)
    assert clf.predict(X[:2]).shape == (2,)


def test_validation(blobs):
    X, y = blobs
    with pytest.raises(NotFittedError):
        InfiNetClassifier().predict(X)
    for bad in (X[0], X[..., :2], X * 2, np.full_like(X, np.nan), X[:0], X.astype(str)):
        with pytest.raises(ValueError):
            check_images(bad)
    with pytest.raises(ValueError):
        check_labels(y[:-1], len(X))
    with pytest.raises(ValueError):
        check_labels(np.linspace(0, 1, len(X)), len(X))
    with pytest.raises(ValueError):
        InfiNetClassifier(precision="f16").fit(X, y)
    clf = InfiNetClassifier(epochs=0).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X[:, :8, :8])
