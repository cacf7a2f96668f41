"""scikit-learn style wrappers around the PGD attack and the noise predictor.

``X`` is a batch of unit-range RGB images, either an ``(N, H, W, 3)`` array
or a list of ``(H, W, 3)`` arrays of varying size; ``landmarks`` is the
matching ``(N, 5, 2)`` array.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .encoders import default_branches
from .errors import EmptyDataset, ShapeMismatch
from .geometry import check_landmarks
from .losses import LossWeights
from .pgd import PgdConfig, pgd_protect
from .predictor import DEFAULT_STAGES, PredictorModel, TrainOptions, protect, train


def check_images(X):
    """Validate an image batch and return it as a list of float arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        raise ShapeMismatch("expected a batch of images; wrap a single image as X[None]")
    imgs = [np.asarray(x, dtype=float) for x in X]
    if not imgs:
        raise EmptyDataset("empty image batch")
    for i, img in enumerate(imgs):
        if img.ndim != 3 or img.shape[2] != 3:
            raise ShapeMismatch(f"image {i}: expected HxWx3, got {img.shape}")
        if not np.all(np.isfinite(img)):
            raise ValueError(f"image {i} contains non-finite values")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError(f"image {i} is outside the unit range")
    return imgs


def check_landmark_batch(landmarks, n):
    if landmarks is None:
        raise ValueError("landmarks are required")
    pts = [check_landmarks(p) for p in landmarks]
    if len(pts) != n:
        raise ShapeMismatch(f"{len(pts)} landmark sets for {n} images")
    return pts


def _stack(imgs):
    if len({im.shape for im in imgs}) == 1:
        return np.stack(imgs)
    return imgs


def _alphas(branches, alphas):
    if alphas is None:
        return tuple(b.weight for b in branches)
    if len(alphas) != len(branches):
        raise ValueError(f"{len(alphas)} alphas for {len(branches)} branches")
    return tuple(alphas)


class PGDProtector(TransformerMixin, BaseEstimator):
    """Per-image PGD protection. ``fit`` only validates and builds the victim branches.

    Parameters
    ----------
    epsilon, step, iterations, eot_samples, jitter_sigma, seed
        Passed to :class:`idshield.pgd.PgdConfig`. Image ``i`` uses seed ``seed + i``.
    alphas : sequence of float, optional
        Per-branch weights; defaults to the branch weights (uniform).
    beta1, beta2 : float
        Regulariser weights (raw-sum l1 norms).
    eot_distortions : tuple of str
        Extra differentiable distortions averaged over by EoT.
    branches : list of EncoderBranch, optional
        Victim branches; defaults to :func:`idshield.encoders.default_branches`.
    """

    def __init__(self, epsilon=0.035, step=None, iterations=100, eot_samples=1,
                 jitter_sigma=0.003, seed=0, alphas=None, beta1=0.0, beta2=0.0,
                 eot_distortions=(), branches=None):
        self.epsilon = epsilon
        self.step = step
        self.iterations = iterations
        self.eot_samples = eot_samples
        self.jitter_sigma = jitter_sigma
        self.seed = seed
        self.alphas = alphas
        self.beta1 = beta1
        self.beta2 = beta2
        self.eot_distortions = eot_distortions
        self.branches = branches

    def fit(self, X=None, y=None, landmarks=None):
        self.branches_ = list(self.branches) if self.branches is not None else default_branches()
        self.weights_ = LossWeights(_alphas(self.branches_, self.alphas), self.beta1,
                                    self.beta2, self.epsilon)
        PgdConfig(self.epsilon, self.step, self.iterations, self.eot_samples,
                  self.jitter_sigma, self.seed, tuple(self.eot_distortions))
        return self

    def protect_one(self, img, landmarks, seed):
        check_is_fitted(self, "weights_")
        cfg = PgdConfig(self.epsilon, self.step, self.iterations, self.eot_samples,
                        self.jitter_sigma, seed, tuple(self.eot_distortions))
        return pgd_protect(img, landmarks, self.branches_, self.weights_, cfg)

    def transform(self, X, landmarks=None):
        check_is_fitted(self, "weights_")
        imgs = check_images(X)
        pts = check_landmark_batch(landmarks, len(imgs))
        self.traces_ = []
        out = []
        for i, (img, lm) in enumerate(zip(imgs, pts)):
            prot, trace = self.protect_one(img, lm, self.seed + i)
            out.append(prot)
            self.traces_.append(trace)
        return _stack(out)

    def fit_transform(self, X, y=None, landmarks=None):
        return self.fit(X, y, landmarks=landmarks).transform(X, landmarks=landmarks)


class NoiseEncoder(TransformerMixin, BaseEstimator):
    """Feed-forward protector: ``fit`` trains the predictor, ``transform`` applies it.

    ``epsilon`` is the budget used at transform time; training follows
    ``stages`` (the built-in three-stage curriculum by default).
    """

    def __init__(self, epsilon=0.035, stages=DEFAULT_STAGES, total_steps=None, batch_size=4,
                 lr_scale=1.0, reg_scale=1.0, jitter_sigma=0.003, hidden_dim=64,
                 patch_size=16, seed=0, branches=None, stage_lr_scale=None):
        self.epsilon = epsilon
        self.stages = stages
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.lr_scale = lr_scale
        self.reg_scale = reg_scale
        self.jitter_sigma = jitter_sigma
        self.hidden_dim = hidden_dim
        self.patch_size = patch_size
        self.seed = seed
        self.branches = branches
        self.stage_lr_scale = stage_lr_scale

    def fit(self, X, y=None, landmarks=None):
        imgs = check_images(X)
        pts = check_landmark_batch(landmarks, len(imgs))
        branches = list(self.branches) if self.branches is not None else default_branches()
        model = PredictorModel(224, self.patch_size, self.hidden_dim, seed=self.seed)
        opts = TrainOptions(batch_size=self.batch_size, total_steps=self.total_steps,
                            lr_scale=self.lr_scale, stage_lr_scale=self.stage_lr_scale,
                            reg_scale=self.reg_scale,
                            jitter_sigma=self.jitter_sigma, seed=self.seed)
        self.model_, self.log_ = train(model, list(zip(imgs, pts)), branches, self.stages, opts)
        self.branches_ = branches
        return self

    def transform(self, X, landmarks=None):
        check_is_fitted(self, "model_")
        imgs = check_images(X)
        pts = check_landmark_batch(landmarks, len(imgs))
        return _stack([protect(self.model_, img, lm, self.epsilon) for img, lm in zip(imgs, pts)])

    def fit_transform(self, X, y=None, landmarks=None):
        return self.fit(X, y, landmarks=landmarks).transform(X, landmarks=landmarks)
