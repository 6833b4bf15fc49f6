import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from glassmat import TransparentObjectEstimator
from glassmat.estimator import camera_rays, check_rays


@pytest.fixture(scope="module")
def fitted(tiny_dataset):
    est = TransparentObjectEstimator(iterations=2, geometry="analytic", freeze_geometry=True, patches=4,
                                     eik_samples=16, sil_samples=8)
    return est.fit(tiny_dataset)


def test_params_round_trip():
    est = TransparentObjectEstimator(iterations=5, lr=1e-3)
    c = clone(est)
    assert c.get_params() == est.get_params()
    c.set_params(seed=3)
    assert c.seed == 3 and est.seed == 0


def test_not_fitted():
    with pytest.raises(NotFittedError):
        TransparentObjectEstimator().predict(np.zeros((1, 6)) + [0, 0, 0, 0, 0, 1])


def test_check_rays():
    o, d = check_rays([[0, 0, 3, 0, 0, -2]])
    assert np.allclose(d, [[0, 0, -1]])
    with pytest.raises(ValueError):
        check_rays(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        check_rays(np.zeros((2, 6)))


def test_fit_from_path(tiny_dataset_dir):
    est = TransparentObjectEstimator(iterations=1, geometry="analytic", patches=2, eik_samples=8, sil_samples=8)
    assert est.fit(str(tiny_dataset_dir)) is est
    assert len(est.log_) == 1


def test_predict_shapes(fitted, tiny_dataset):
    X = camera_rays(tiny_dataset.test[0].camera)
    rgb = fitted.predict(X)
    wt = fitted.transform(X)
    mask = fitted.predict_mask(X)
    assert rgb.shape == (len(X), 3) and wt.shape == (len(X), 4) and mask.shape == (len(X),)
    assert np.all(rgb[~mask] == 0) and np.all(wt[~mask] == 0)
    assert np.allclose(np.linalg.norm(wt[mask, :3], axis=1), 1.0)
    assert np.all(wt[mask, 3] > 1.0)


def test_score(fitted, tiny_dataset):
    s = fitted.score(tiny_dataset)
    assert np.isfinite(s) and 0 < s <= 99


def test_bad_input(fitted):
    with pytest.raises(TypeError):
        fitted.fit(42)
