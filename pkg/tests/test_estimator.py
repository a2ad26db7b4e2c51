import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from panorec import PanoramicReconstructor
from panorec.estimator import check_image_stack, check_volume_stack
from panorec.geometry import toy_geometry
from panorec.metrics import psnr
from panorec.physics import make_phantom, synthesize_px
from panorec.preprocess import normalize_scan


@pytest.fixture(scope="module")
def stacks():
    geom = toy_geometry()
    X, y = [], []
    for seed in (11, 12, 13):
        ph = make_phantom(seed, 32, geom)
        X.append(synthesize_px(ph.volume, geom))
        y.append(normalize_scan(ph.volume))
    return np.stack(X), np.stack(y)


@pytest.fixture(scope="module")
def fitted(stacks):
    X, y = stacks
    est = PanoramicReconstructor(epochs=3, seed=5)
    return est.fit(X, y)


# ------------------------------------------------------------- params

def test_get_params_roundtrip():
    est = PanoramicReconstructor(epochs=7, lr=2e-3, seed=9)
    p = est.get_params()
    assert p["epochs"] == 7 and p["lr"] == 2e-3 and p["seed"] == 9
    est2 = PanoramicReconstructor().set_params(**p)
    assert est2.get_params() == p


def test_set_params_unknown_key_raises():
    with pytest.raises(ValueError):
        PanoramicReconstructor().set_params(bogus=1)


def test_clone_preserves_config():
    est = PanoramicReconstructor(epochs=4, lambda_perc=0.5)
    dup = clone(est)
    assert dup.get_params() == est.get_params()
    assert not hasattr(dup, "pipeline_")


# ------------------------------------------------------------- validation

def test_predict_before_fit_raises(stacks):
    X, _ = stacks
    with pytest.raises(NotFittedError):
        PanoramicReconstructor().predict(X)


@pytest.mark.parametrize("kw", [
    {"scale": "huge"},
    {"epochs": 0},
    {"epochs": 2.5},
    {"lr": 0.0},
    {"lr": -1e-3},
    {"lambda_proj": -1.0},
    {"seed": -1},
])
def test_fit_rejects_bad_config(stacks, kw):
    X, y = stacks
    with pytest.raises(ValueError):
        PanoramicReconstructor(**kw).fit(X, y)


def test_fit_rejects_shape_mismatch(stacks):
    X, y = stacks
    with pytest.raises(ValueError, match="expected"):
        PanoramicReconstructor().fit(X[:, :16, :], y)
    with pytest.raises(ValueError, match="expected"):
        PanoramicReconstructor().fit(X, y[:, :, :32, :])


def test_fit_rejects_count_mismatch(stacks):
    X, y = stacks
    with pytest.raises(ValueError, match="samples"):
        PanoramicReconstructor(epochs=1).fit(X[:2], y)


def test_fit_rejects_non_finite(stacks):
    X, y = stacks
    bad = X.copy()
    bad[1, 3, 4] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        PanoramicReconstructor().fit(bad, y)


def test_check_helpers_accept_lists(stacks):
    X, y = stacks
    sx = check_image_stack(list(X), (32, 64))
    sy = check_volume_stack(list(y), (32, 64, 64))
    assert sx.shape == (3, 32, 64) and sy.shape == (3, 32, 64, 64)
    with pytest.raises(ValueError, match="empty"):
        check_image_stack([], (32, 64))


# ------------------------------------------------------------- fit/predict

def test_fit_returns_self_and_sets_state(fitted):
    assert isinstance(fitted, PanoramicReconstructor)
    assert fitted.n_iter_ == 3
    assert len(fitted.loss_curve_) == 3
    assert all(np.isfinite(v) for v in fitted.loss_curve_)
    assert fitted.image_shape_ == (32, 64)
    assert fitted.volume_shape_ == (32, 64, 64)


def test_fit_decreases_loss(fitted):
    assert fitted.loss_curve_[-1] < fitted.loss_curve_[0]


def test_predict_shape_dtype_range(fitted, stacks):
    X, _ = stacks
    V = fitted.predict(X[:2])
    assert V.shape == (2, 32, 64, 64)
    assert V.dtype == np.float32
    assert np.all(V >= 0) and np.all(V <= 255)


def test_predict_rejects_wrong_grid(fitted, stacks):
    X, _ = stacks
    with pytest.raises(ValueError, match="expected"):
        fitted.predict(X[:, :, :32])


def test_same_seed_reproduces_predictions(stacks):
    X, y = stacks
    a = PanoramicReconstructor(epochs=2, seed=3).fit(X, y).predict(X)
    b = PanoramicReconstructor(epochs=2, seed=3).fit(X, y).predict(X)
    np.testing.assert_array_equal(a, b)


def test_score_is_mean_psnr(fitted, stacks):
    X, y = stacks
    s = fitted.score(X, y)
    preds = fitted.predict(X)
    manual = np.mean([psnr(p.astype(np.float64), g)
                      for p, g in zip(preds, y)])
    assert s == pytest.approx(manual, abs=1e-12)
    assert np.isfinite(s) and s > 0
