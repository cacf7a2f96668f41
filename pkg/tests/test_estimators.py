import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from idshield.errors import EmptyDataset, ShapeMismatch
from idshield.estimators import NoiseEncoder, PGDProtector, check_images
from idshield.pgd import PgdConfig, pgd_protect
from idshield.losses import LossWeights
from idshield.predictor import CurriculumStage


def batch(faces, n=2):
    return np.stack([f[0] for f in faces[:n]]), np.stack([f[1] for f in faces[:n]])


def test_params_round_trip():
    est = PGDProtector(epsilon=0.02, iterations=7)
    assert est.get_params()["iterations"] == 7
    c = clone(est)
    assert c.get_params()["epsilon"] == 0.02
    est.set_params(iterations=3)
    assert est.iterations == 3


def test_not_fitted(faces):
    X, L = batch(faces)
    with pytest.raises(NotFittedError):
        PGDProtector().transform(X, landmarks=L)
    with pytest.raises(NotFittedError):
        NoiseEncoder().transform(X, landmarks=L)


def test_pgd_protector_matches_function(faces, branches):
    X, L = batch(faces)
    est = PGDProtector(iterations=3, seed=5)
    out = est.fit_transform(X, landmarks=L)
    assert out.shape == X.shape and len(est.traces_) == 2
    w = LossWeights((0.25,) * 4, epsilon=0.035)
    ref, _ = pgd_protect(X[1], L[1], branches, w, PgdConfig(iterations=3, seed=6))
    np.testing.assert_array_equal(out[1], ref)


def test_pgd_protector_validates(faces):
    X, L = batch(faces)
    with pytest.raises(ValueError):
        PGDProtector(iterations=0).fit(X)
    with pytest.raises(ValueError):
        PGDProtector(alphas=(1.0,)).fit(X)
    est = PGDProtector(iterations=1).fit(X)
    with pytest.raises(ShapeMismatch):
        est.transform(X, landmarks=L[:1])
    with pytest.raises(ValueError):
        est.transform(X)


def test_check_images():
    with pytest.raises(EmptyDataset):
        check_images([])
    with pytest.raises(ShapeMismatch):
        check_images(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        check_images([np.full((4, 4, 3), 2.0)])
    with pytest.raises(ValueError):
        check_images([np.full((4, 4, 3), np.nan)])
    assert len(check_images([np.zeros((4, 4, 3)), np.zeros((5, 6, 3))])) == 2


def test_noise_encoder_fit_transform(faces):
    X, L = batch(faces)
    stage = CurriculumStage(1, (0.25,) * 4, 1e-3, 1e-4, 0.035, 1e-2)
    est = NoiseEncoder(stages=[stage], total_steps=2, batch_size=2)
    out = est.fit_transform(X, landmarks=L)
    assert out.shape == X.shape
    assert np.max(np.abs(out - X)) <= 0.035 + 1e-12
    assert len(est.log_.rows) == 2
    est.set_params(epsilon=0.0)
    np.testing.assert_array_equal(est.transform(X, landmarks=L), X)
