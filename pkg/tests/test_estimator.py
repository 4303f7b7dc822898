import inspect

import numpy as np
import pytest
from sklearn.base import clone

from swin_mil.estimator import SwinMILSegmenter
from swin_mil.validation import check_bag_labels, check_images


def toy(n=8, size=32, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, size, size), dtype=np.float32) * 0.3
    y = np.arange(n) % 2
    X[y == 1, 8:20, 8:20] += 0.6
    return X, y


SMALL = dict(depths=(2, 2), num_heads=(3, 6), epochs=2)


def test_get_params_and_clone():
    est = SwinMILSegmenter(**SMALL, random_state=4)
    params = est.get_params()
    assert params["depths"] == (2, 2) and params["random_state"] == 4
    assert clone(est).get_params() == params
    est.set_params(lr=0.01)
    assert est.lr == 0.01


def test_fit_signature_has_no_mask_argument():
    assert list(inspect.signature(SwinMILSegmenter.fit).parameters) == ["self", "X", "y"]


def test_fit_transform_predict():
    X, y = toy()
    est = SwinMILSegmenter(**SMALL).fit(X, y)
    assert len(est.loss_history_) == 4
    maps = est.transform(X)
    assert maps.shape == (8, 32, 32)
    assert est.predict_mask(X).dtype == bool
    proba = est.predict_proba(X)
    np.testing.assert_allclose(proba.sum(1), 1.0)
    assert set(np.unique(est.predict(X))) <= {0, 1}
    stages, fused = est.side_outputs(X)
    assert len(stages) == 2
    np.testing.assert_array_equal(fused, maps)


def test_fit_is_reproducible():
    X, y = toy()
    a = SwinMILSegmenter(**SMALL, random_state=1).fit(X, y).transform(X)
    b = SwinMILSegmenter(**SMALL, random_state=1).fit(X, y).transform(X)
    np.testing.assert_array_equal(a, b)


def test_unfitted_and_wrong_shape():
    X, y = toy()
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        SwinMILSegmenter().transform(X)
    est = SwinMILSegmenter(**{**SMALL, "epochs": 1}).fit(X, y)
    with pytest.raises(ValueError):
        est.transform(np.zeros((1, 64, 64), np.float32))


def test_checkpoint_round_trip():
    X, y = toy()
    est = SwinMILSegmenter(**{**SMALL, "epochs": 1}).fit(X, y)
    back = SwinMILSegmenter.from_checkpoint(est.to_checkpoint())
    assert back.get_params()["depths"] == (2, 2)
    np.testing.assert_array_equal(back.transform(X), est.transform(X))


def test_input_validation():
    with pytest.raises(ValueError):
        check_images(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 4, 4), np.nan))
    with pytest.raises(ValueError):
        check_bag_labels([0, 1, 2])
    with pytest.raises(ValueError):
        check_bag_labels([0, 1], n=3)
    assert check_images(np.zeros((2, 4, 4))).shape == (2, 4, 4, 1)
    assert check_bag_labels([[1], [0]]).tolist() == [1, 0]
