"""Frozen surrogate feature extractors and the preprocessing branches around them.

Each encoder is a one-layer patch network with a hand-written
vector-Jacobian product, so every attack gradient in the package is exact
and checkable against finite differences.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .blobs import ENCODER_MAGIC, pack_arrays, unpack_arrays
from .errors import ShapeMismatch, ZeroFeature

GLOBAL = "global_unit_vector"
PATCH_GRID = "patch_grid"
ZERO_FEATURE_TOL = 1e-8


def _name_seed(name):
    return zlib.crc32(name.encode("utf-8"))


def patchify(img, p):
    h, w, c = img.shape
    if h % p or w % p:
        raise ShapeMismatch(f"image {h}x{w} is not divisible by patch size {p}")
    x = img.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape((h // p) * (w // p), p * p * c)


def unpatchify(x, h, w, p, c):
    x = x.reshape(h // p, w // p, p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(h, w, c)


def _attenuate_dc(proj, p, c, gain):
    basis = np.zeros((p * p * c, c))
    for ch in range(c):
        basis[ch::c, ch] = 1.0 / p
    return proj - (1.0 - gain) * basis @ (basis.T @ proj)


class SurrogateEncoder:
    """Patch projection -> tanh -> (mean pool -> mix -> unit norm | per-patch mix).

    Parameters
    ----------
    name : str
        Seeds the weights, so equal names give equal encoders.
    input_size : int
        Side of the square image the encoder consumes.
    patch_size : int
    feature_dim : int
    output_kind : {"global_unit_vector", "patch_grid"}
    hidden_dim : int, optional
        Width of the projected patch tokens; defaults to ``feature_dim``.
    dc_gain : float
        Residual response of the projection to a patch's per-channel mean.
        Attenuating flat colour makes the features depend on local structure,
        which is what renders learned extractors vulnerable to small noise.
    """

    def __init__(self, name, input_size, patch_size, feature_dim=64,
                 output_kind=GLOBAL, hidden_dim=None, channels=3, weights=None,
                 dc_gain=0.02):
        if output_kind not in (GLOBAL, PATCH_GRID):
            raise ValueError(f"unknown output kind {output_kind!r}")
        self.name = name
        self.input_size = input_size
        self.patch_size = patch_size
        self.feature_dim = feature_dim
        self.output_kind = output_kind
        self.channels = channels
        hidden_dim = hidden_dim or feature_dim
        fan_in = patch_size * patch_size * channels
        if weights is None:
            rng = np.random.default_rng(_name_seed(name))
            proj = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, hidden_dim))
            proj = _attenuate_dc(proj, patch_size, channels, dc_gain)
            mix = rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(hidden_dim, feature_dim))
        else:
            proj, mix = (np.array(w, dtype=float) for w in weights)
            if proj.shape[0] != fan_in or mix.shape[0] != proj.shape[1]:
                raise ShapeMismatch("weight shapes do not match patch size / channels")
        proj.setflags(write=False)
        mix.setflags(write=False)
        self.proj = proj
        self.mix = mix

    @property
    def num_patches(self):
        return (self.input_size // self.patch_size) ** 2

    @property
    def output_shape(self):
        if self.output_kind == GLOBAL:
            return (self.mix.shape[1],)
        return (self.num_patches, self.mix.shape[1])

    def __repr__(self):
        return (f"SurrogateEncoder({self.name!r}, input_size={self.input_size}, "
                f"patch_size={self.patch_size}, output_kind={self.output_kind!r})")

    def _check_image(self, img):
        img = np.asarray(img, dtype=float)
        if img.ndim != 3 or img.shape[2] != self.channels:
            raise ShapeMismatch(f"expected HxWx{self.channels} image, got {img.shape}")
        return img

    def _forward(self, img):
        img = self._check_image(img)
        x = patchify(img, self.patch_size)
        hid = np.tanh(x @ self.proj)
        if self.output_kind == PATCH_GRID:
            return hid @ self.mix, (img.shape, x, hid, None, None)
        z = hid.mean(axis=0) @ self.mix
        norm = np.sqrt(z @ z)
        if norm < ZERO_FEATURE_TOL:
            raise ZeroFeature(f"{self.name}: pre-normalisation feature norm {norm:.3e}")
        e = z / norm
        return e, (img.shape, x, hid, e, norm)

    def _backward(self, cache, cotangent):
        shape, x, hid, e, norm = cache
        c = np.asarray(cotangent, dtype=float)
        if c.shape != self.output_shape:
            raise ShapeMismatch(f"cotangent shape {c.shape} != output shape {self.output_shape}")
        if self.output_kind == PATCH_GRID:
            d_hid = c @ self.mix.T
        else:
            dz = (c - e * (e @ c)) / norm
            d_hid = np.broadcast_to((self.mix @ dz) / hid.shape[0], hid.shape)
        d_pre = d_hid * (1.0 - hid * hid)
        dx = d_pre @ self.proj.T
        h, w, ch = shape
        return unpatchify(dx, h, w, self.patch_size, ch)

    def forward(self, img):
        return self._forward(img)[0]

    def vjp(self, img, cotangent):
        """Gradient of ``<forward(img), cotangent>`` with respect to ``img``."""
        _, cache = self._forward(img)
        return self._backward(cache, cotangent)

    def to_bytes(self) -> bytes:
        return pack_arrays(ENCODER_MAGIC, [self.proj, self.mix])

    @classmethod
    def from_bytes(cls, data, name, input_size, output_kind=GLOBAL, channels=3):
        proj, mix = unpack_arrays(ENCODER_MAGIC, data)
        patch = int(round(np.sqrt(proj.shape[0] / channels)))
        return cls(name, input_size, patch, feature_dim=mix.shape[1],
                   output_kind=output_kind, hidden_dim=mix.shape[0],
                   channels=channels, weights=(proj, mix))


# -- preprocessing ---------------------------------------------------------

@dataclass(frozen=True)
class AlignFace:
    """Least-squares align the five landmarks onto a template and crop."""

    template: geometry.AlignmentTemplate = field(default_factory=lambda: geometry.DEFAULT_TEMPLATE)
    similarity: bool = False

    def affine(self, landmarks, img_shape):
        fit = geometry.fit_similarity if self.similarity else geometry.fit_affine
        return fit(landmarks, self.template.targets)

    @property
    def out_size(self):
        return self.template.size

    jittered = True


@dataclass(frozen=True)
class CenterCropResize:
    """Scale the shorter side to ``side`` and keep the central square."""

    side: int = 224

    def affine(self, landmarks, img_shape):
        h, w = img_shape
        s = self.side / min(h, w)
        off_x = (w * s - self.side) / 2.0
        off_y = (h * s - self.side) / 2.0
        return np.array([[s, 0.0, 0.5 * s - 0.5 - off_x], [0.0, s, 0.5 * s - 0.5 - off_y]])

    @property
    def out_size(self):
        return self.side

    jittered = False


@dataclass
class EncoderBranch:
    name: str
    preprocess: tuple
    encoder: SurrogateEncoder
    weight: float = 1.0

    @property
    def needs_landmarks(self):
        return any(isinstance(step, AlignFace) for step in self.preprocess)


@dataclass
class PreprocessTrace:
    """Everything needed to replay a branch backward without refitting."""

    affines: list
    samplers: list
    encoder_input: np.ndarray
    cache: tuple = field(repr=False, default=None)


def normalize_weights(branches):
    total = sum(b.weight for b in branches)
    if total <= 0:
        raise ValueError("branch weights must have a positive sum")
    return [EncoderBranch(b.name, b.preprocess, b.encoder, b.weight / total) for b in branches]


def branch_features(branch, img, landmarks=None, jitter_sigma=0.0, rng=None):
    """Run the branch's preprocessing chain and encoder.

    Affine jitter (``jitter_sigma``) only touches alignment steps. Returns
    ``(features, trace)``; pass the trace to :func:`branch_vjp`.
    """
    x = np.asarray(img, dtype=float)
    pts = None if landmarks is None else geometry.check_landmarks(landmarks)
    affines, samplers = [], []
    for step in branch.preprocess:
        if isinstance(step, AlignFace) and pts is None:
            raise ValueError(f"branch {branch.name!r} aligns faces but no landmarks were given")
        a = step.affine(pts, x.shape[:2])
        size = step.out_size
        if step.jittered and jitter_sigma > 0:
            if rng is None:
                raise ValueError("jitter requires an rng")
            a = geometry.perturb_affine(a, jitter_sigma, rng)
            sampler = geometry.affine_sampler(a, x.shape[:2], size, size)
        else:
            border = "zero" if step.jittered else "clamp"
            sampler = geometry.cached_sampler(a, x.shape[:2], size, size, border=border)
        x = sampler.apply(x)
        if pts is not None:
            pts = geometry.apply_affine(a, pts)
        affines.append(a)
        samplers.append(sampler)
    feats, cache = branch.encoder._forward(x)
    return feats, PreprocessTrace(affines, samplers, x, cache)


def branch_vjp(branch, trace, cotangent):
    """Pull a feature cotangent back through the encoder and the recorded warps."""
    g = branch.encoder._backward(trace.cache, cotangent)
    for sampler in reversed(trace.samplers):
        g = sampler.vjp(g)
    return g


def default_branches(template=None, feature_dim=64):
    """Four victim branches, ordered as the curriculum's alpha_1..alpha_4.

    ``ip_adapter`` (global CLIP-like embedding), ``ip_adapter_plus`` and
    ``photomaker`` (CLIP-like patch grids), ``instantid`` (aligned face,
    ArcFace-like embedding). Weights start uniform.
    """
    template = template or geometry.DEFAULT_TEMPLATE
    crop = (CenterCropResize(224),)
    return [
        EncoderBranch("ip_adapter", crop,
                      SurrogateEncoder("clip_image_embed", 224, 32, feature_dim, GLOBAL), 0.25),
        EncoderBranch("ip_adapter_plus", crop,
                      SurrogateEncoder("clip_plus_tokens", 224, 32, feature_dim, PATCH_GRID), 0.25),
        EncoderBranch("photomaker", crop,
                      SurrogateEncoder("clip_photomaker_tokens", 224, 32, feature_dim, PATCH_GRID), 0.25),
        EncoderBranch("instantid", (AlignFace(template),),
                      SurrogateEncoder("arcface", template.size, 16, feature_dim, GLOBAL), 0.25),
    ]
