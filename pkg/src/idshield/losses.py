"""Identity-similarity objective, perturbation regularisers and their gradients.

The minimised objective is::

    L = sum_i alpha_i * cossim(e_i, e_i') + beta1 * |delta|_1
        + beta2 * |delta - clip(delta, -eps, eps)|_1

with ``e_i`` the clean and ``e_i'`` the perturbed features of branch ``i``.
L1 norms are raw sums over all elements.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import branch_features, branch_vjp
from .geometry import apply_affine
from .errors import BranchMismatch, ZeroFeature

NORM_TOL = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alphas: tuple
    beta1: float = 0.0
    beta2: float = 0.0
    epsilon: float = 0.035
    patch_mean: bool = False

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "alphas", alphas)
        if any(a < 0 for a in alphas) or self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")

    @classmethod
    def from_stage(cls, stage, **kw):
        return cls(stage.alphas, stage.beta1, stage.beta2, stage.epsilon, **kw)


def _rows(e, patch_mean):
    e = np.asarray(e, dtype=float)
    if patch_mean and e.ndim == 2:
        return e
    return e.reshape(1, -1)


def cosine_sim(e1, e2, patch_mean=False) -> float:
    """Cosine of the angle between two features (patch grids are flattened).

    With ``patch_mean=True`` a 2-D grid is compared row by row and the
    per-patch cosines are averaged instead.
    """
    a = _rows(e1, patch_mean)
    b = _rows(e2, patch_mean)
    if a.shape != b.shape:
        raise BranchMismatch(f"feature shapes differ: {a.shape} vs {b.shape}")
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    if np.any(np.sqrt(aa) <= NORM_TOL) or np.any(np.sqrt(bb) <= NORM_TOL):
        raise ZeroFeature("cannot take the cosine of a zero feature")
    cos = np.einsum("ij,ij->i", a, b) / np.sqrt(aa * bb)
    return float(np.clip(cos, -1.0, 1.0).mean())


def cosine_grad(e1, e2, patch_mean=False) -> np.ndarray:
    """d cossim(e1, e2) / d e2, shaped like ``e2``."""
    shape = np.shape(e2)
    a = _rows(e1, patch_mean)
    b = _rows(e2, patch_mean)
    na = np.sqrt(np.einsum("ij,ij->i", a, a))[:, None]
    nb2 = np.einsum("ij,ij->i", b, b)[:, None]
    if np.any(na <= NORM_TOL) or np.any(np.sqrt(nb2) <= NORM_TOL):
        raise ZeroFeature("cannot take the cosine of a zero feature")
    nb = np.sqrt(nb2)
    cos = np.einsum("ij,ij->i", a, b)[:, None] / (na * nb)
    g = a / (na * nb) - cos * b / nb2
    return (g / a.shape[0]).reshape(shape)


def _check_branch_lists(clean, pert, w):
    if not (len(clean) == len(pert) == len(w.alphas)):
        raise BranchMismatch(
            f"{len(clean)} clean / {len(pert)} perturbed features for {len(w.alphas)} weights"
        )


def branch_cosines(clean, pert, w) -> list:
    _check_branch_lists(clean, pert, w)
    return [cosine_sim(c, p, w.patch_mean) for c, p in zip(clean, pert)]


def adv_loss(clean, pert, w: LossWeights) -> float:
    cos = branch_cosines(clean, pert, w)
    return float(sum(a * c for a, c in zip(w.alphas, cos)))


def reg_loss(delta, w: LossWeights) -> float:
    d = np.asarray(delta, dtype=float)
    over = d - np.clip(d, -w.epsilon, w.epsilon)
    return float(w.beta1 * np.abs(d).sum() + w.beta2 * np.abs(over).sum())


def reg_grad(delta, w: LossWeights) -> np.ndarray:
    """Subgradient of :func:`reg_loss`; ``sign(0) = 0`` for both terms."""
    d = np.asarray(delta, dtype=float)
    over = d - np.clip(d, -w.epsilon, w.epsilon)
    return w.beta1 * np.sign(d) + w.beta2 * np.sign(over)


def total_loss(clean, pert, delta, w: LossWeights) -> float:
    return adv_loss(clean, pert, w) + reg_loss(delta, w)


def clean_features(img, branches, landmarks=None):
    """Reference features of the unprotected image (no jitter)."""
    return [branch_features(b, img, landmarks)[0] for b in branches]


@dataclass
class LossEval:
    total: float
    adv: float
    reg: float
    cosines: list
    grad: np.ndarray = field(repr=False)


def evaluate(img, delta, branches, landmarks, w: LossWeights, rng=None, *,
             jitter_sigma=0.0, clean=None, augment=None, need_grad=True) -> LossEval:
    """Loss of ``img + delta`` and its exact gradient with respect to ``delta``.

    ``augment``, if given, is a callable ``x -> (x', vjp, affine)`` applied to
    the perturbed image before the branches (used for expectation over
    transformations); landmarks follow ``affine`` when it is not ``None``.
    """
    if len(branches) != len(w.alphas):
        raise BranchMismatch(f"{len(branches)} branches but {len(w.alphas)} alpha weights")
    delta = np.asarray(delta, dtype=float)
    if clean is None:
        clean = clean_features(img, branches, landmarks)
    x = np.asarray(img, dtype=float) + delta
    pts = landmarks
    aug_vjp = None
    if augment is not None:
        x, aug_vjp, aff = augment(x)
        if aff is not None and landmarks is not None:
            pts = apply_affine(aff, landmarks)

    cosines = []
    grad = np.zeros_like(x) if need_grad else None
    for branch, alpha, ref in zip(branches, w.alphas, clean):
        feats, trace = branch_features(branch, x, pts, jitter_sigma, rng)
        cosines.append(cosine_sim(ref, feats, w.patch_mean))
        if need_grad and alpha != 0:
            cot = alpha * cosine_grad(ref, feats, w.patch_mean)
            grad += branch_vjp(branch, trace, cot)
    if need_grad and aug_vjp is not None:
        grad = aug_vjp(grad)
    adv = float(sum(a * c for a, c in zip(w.alphas, cosines)))
    reg = reg_loss(delta, w)
    if need_grad:
        grad = grad + reg_grad(delta, w)
    return LossEval(adv + reg, adv, reg, cosines, grad)


def loss_grad(img, delta, branches, landmarks, w: LossWeights, rng=None, **kw) -> np.ndarray:
    """Exact d L / d delta (adversarial term via branch VJPs plus L1 subgradients)."""
    return evaluate(img, delta, branches, landmarks, w, rng, **kw).grad
