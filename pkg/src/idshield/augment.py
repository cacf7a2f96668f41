"""Image distortions used for robust optimisation and robustness evaluation.

Every random operation takes an explicit ``numpy.random.Generator``. The
``*_with_vjp`` helpers return ``(image, vjp, affine)`` triples: ``vjp`` pulls
a cotangent on the output back to the input, ``affine`` maps input pixel
coordinates to output coordinates (``None`` when geometry is unchanged).
"""
from __future__ import annotations

import math

import numpy as np

from . import geometry

SUITE_NAMES = ("affine", "jpeg", "crop", "noisy")
SUITE_JPEG_QUALITY = 85
SUITE_CROP_FRACTION = 0.2
SUITE_NOISE_VARIANCE = 100.0
SUITE_AFFINE_SIGMA = 0.05

# ITU T.81 Annex K luminance table
ANNEX_K_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=float,
)


def _dct_matrix(n=8):
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    d[0] /= np.sqrt(2.0)
    return d


DCT8 = _dct_matrix()


def quant_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the Annex K table, entries clipped to [1, 255]."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in 1..100, got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((ANNEX_K_LUMA * scale + 50.0) / 100.0), 1.0, 255.0)


def _blocks(x):
    h, w, c = x.shape
    return x.reshape(h // 8, 8, w // 8, 8, c).transpose(0, 2, 4, 1, 3)


def _unblocks(b, h, w, c):
    return b.transpose(0, 3, 1, 4, 2).reshape(h, w, c)


def _pad8(img):
    h, w = img.shape[:2]
    ph = (-h) % 8
    pw = (-w) % 8
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")


def _jpeg_pre_clamp(img, quality, rounding):
    img = np.asarray(img, dtype=float)
    h, w, c = img.shape
    x = _pad8(img) * 255.0 - 128.0
    ph, pw = x.shape[:2]
    coef = np.einsum("ij,...jk,lk->...il", DCT8, _blocks(x), DCT8)
    q = quant_table(quality)
    scaled = coef / q
    if rounding:
        scaled = np.round(scaled)
    rec = np.einsum("ji,...jk,kl->...il", DCT8, scaled * q, DCT8)
    out = (_unblocks(rec, ph, pw, c) + 128.0) / 255.0
    return out[:h, :w]


def jpeg_sim(img, quality: int, rounding: bool = True) -> np.ndarray:
    """Blockwise 8x8 DCT quantisation, applied to every channel independently.

    ``rounding=False`` gives the round-free path whose gradient the
    straight-through backward reproduces.
    """
    return np.clip(_jpeg_pre_clamp(img, quality, rounding), 0.0, 1.0)


def jpeg_vjp(img, quality: int, cotangent) -> np.ndarray:
    """Straight-through backward: the transpose of the round-free pipeline."""
    img = np.asarray(img, dtype=float)
    h, w, c = img.shape
    pre = _jpeg_pre_clamp(img, quality, rounding=False)
    g = np.where((pre > 0.0) & (pre < 1.0), cotangent, 0.0)
    ph, pw = h + (-h) % 8, w + (-w) % 8
    gp = np.zeros((ph, pw, c))
    gp[:h, :w] = g / 255.0
    b = _blocks(gp)
    # transpose of IDCT, of the (identity) quantise-dequantise, then of the DCT
    b = np.einsum("ij,...jk,lk->...il", DCT8, b, DCT8)
    b = np.einsum("ji,...jk,kl->...il", DCT8, b, DCT8)
    gx = _unblocks(b, ph, pw, c) * 255.0
    # transpose of edge padding: fold padded rows/cols back onto the last ones
    out = gx[:h, :w].copy()
    out[:, w - 1] += gx[:h, w:].sum(axis=1)
    out[h - 1, :] += gx[h:, :w].sum(axis=0)
    out[h - 1, w - 1] += gx[h:, w:].sum(axis=(0, 1))
    return out


def crop_window(shape, max_fraction, rng):
    """Sample ``(x0, y0, crop_w, crop_h)`` keeping at least ``1 - max_fraction`` of the area."""
    if not 0 <= max_fraction < 1:
        raise ValueError("max_fraction must lie in [0, 1)")
    h, w = shape
    lo = math.sqrt(1.0 - max_fraction)
    rh, rw = rng.uniform(lo, 1.0, size=2)
    ch = min(h, math.ceil(rh * h))
    cw = min(w, math.ceil(rw * w))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return x0, y0, cw, ch


def random_crop_resize_with_vjp(img, max_fraction, rng):
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    x0, y0, cw, ch = crop_window((h, w), max_fraction, rng)
    a = geometry.crop_resize_affine(x0, y0, cw, ch, h, w)
    sampler = geometry.cached_sampler(a, (h, w), h, w, border="clamp")
    return sampler.apply(img), sampler.vjp, a


def random_crop_resize(img, max_fraction, rng) -> np.ndarray:
    return random_crop_resize_with_vjp(img, max_fraction, rng)[0]


def gaussian_noise_with_vjp(img, variance_8bit, rng):
    if variance_8bit < 0:
        raise ValueError("variance must be non-negative")
    img = np.asarray(img, dtype=float)
    noisy = img + rng.normal(0.0, math.sqrt(variance_8bit) / 255.0, size=img.shape)
    keep = (noisy >= 0.0) & (noisy <= 1.0)
    return np.clip(noisy, 0.0, 1.0), (lambda g: np.where(keep, g, 0.0)), None


def gaussian_noise(img, variance_8bit, rng) -> np.ndarray:
    return gaussian_noise_with_vjp(img, variance_8bit, rng)[0]


def _normalized_frame(h, w):
    # pixel coords -> centred coords spanning roughly [-1, 1]
    return np.array([[2.0 / w, 0.0, -(w - 1) / w], [0.0, 2.0 / h, -(h - 1) / h]])


def random_affine_with_vjp(img, sigma, rng):
    """Warp by ``I + N(0, sigma^2)`` expressed in centred, normalised image coordinates."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    jitter = geometry.perturb_affine(np.eye(2, 3), sigma, rng)
    frame = _normalized_frame(h, w)
    a = geometry.compose_affine(geometry.invert_affine(frame), geometry.compose_affine(jitter, frame))
    sampler = geometry.affine_sampler(a, (h, w), h, w)
    return sampler.apply(img), sampler.vjp, a


def resize_roundtrip_with_vjp(img, rng, low=0.5):
    """Down-then-up bilinear resize by a factor drawn from ``[low, 1)``."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    f = rng.uniform(low, 1.0)
    sh, sw = max(1, round(h * f)), max(1, round(w * f))
    down = geometry.cached_sampler(geometry.resize_affine(h, w, sh, sw), (h, w), sh, sw, border="clamp")
    up = geometry.cached_sampler(geometry.resize_affine(sh, sw, h, w), (sh, sw), h, w, border="clamp")
    return up.apply(down.apply(img)), (lambda g: down.vjp(up.vjp(g))), None


def jpeg_with_vjp(img, quality):
    img = np.asarray(img, dtype=float)
    return jpeg_sim(img, quality), (lambda g: jpeg_vjp(img, quality, g)), None


def distortion_suite_with_geometry(img, rng):
    """The four evaluation distortions as ``(name, image, affine)`` triples."""
    aff_img, _, aff = random_affine_with_vjp(img, SUITE_AFFINE_SIGMA, rng)
    jpg = jpeg_sim(img, SUITE_JPEG_QUALITY)
    crop_img, _, crop_a = random_crop_resize_with_vjp(img, SUITE_CROP_FRACTION, rng)
    noisy = gaussian_noise(img, SUITE_NOISE_VARIANCE, rng)
    return [
        ("affine", aff_img, aff),
        ("jpeg", jpg, None),
        ("crop", crop_img, crop_a),
        ("noisy", noisy, None),
    ]


def eval_distortion_suite(img, rng) -> list:
    """``[(name, distorted)]`` for affine jitter, JPEG q=85, <=20% crop and variance-100 noise."""
    return [(name, out) for name, out, _ in distortion_suite_with_geometry(img, rng)]


EOT_KINDS = ("identity", "jpeg", "crop", "noise", "resize", "affine")


class EotAugmenter:
    """Draws one random differentiable distortion per call.

    Used as the ``augment`` hook of :func:`idshield.losses.evaluate`.
    """

    def __init__(self, rng, kinds=EOT_KINDS, jpeg_quality=(50, 95)):
        unknown = set(kinds) - set(EOT_KINDS)
        if unknown:
            raise ValueError(f"unknown augmentation kinds {sorted(unknown)}")
        self.rng = rng
        self.kinds = tuple(kinds)
        self.jpeg_quality = jpeg_quality

    def __call__(self, img):
        kind = self.kinds[int(self.rng.integers(len(self.kinds)))]
        if kind == "identity":
            return np.asarray(img, dtype=float), (lambda g: g), None
        if kind == "jpeg":
            q = int(self.rng.integers(self.jpeg_quality[0], self.jpeg_quality[1] + 1))
            return jpeg_with_vjp(img, q)
        if kind == "crop":
            return random_crop_resize_with_vjp(img, SUITE_CROP_FRACTION, self.rng)
        if kind == "noise":
            return gaussian_noise_with_vjp(img, SUITE_NOISE_VARIANCE, self.rng)
        if kind == "resize":
            return resize_roundtrip_with_vjp(img, self.rng)
        return random_affine_with_vjp(img, SUITE_AFFINE_SIGMA, self.rng)
