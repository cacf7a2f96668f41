"""Five-point face alignment, bilinear warping and face-region masks.

Coordinates follow the pixel-index convention: the centre of pixel
``img[r, c]`` sits at ``(x, y) = (c, r)``. An affine matrix ``A`` is a
2x3 array mapping a source point ``p`` to ``A[:, :2] @ p + A[:, 2]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateLandmarks, ShapeMismatch, SingularTransform

PIVOT_TOL = 1e-12
DET_TOL = 1e-12

# Standard 5-point target for a 112x112 ArcFace-style crop:
# left eye, right eye, nose tip, left mouth corner, right mouth corner.
ARCFACE_112 = np.array(
    [
        [38.2946, 51.6963],
        [73.5318, 51.5014],
        [56.0252, 71.7366],
        [41.5493, 92.3655],
        [70.7299, 92.2041],
    ]
)


def _square_corners(size):
    lo, hi = -0.5, size - 0.5
    return np.array([[lo, lo], [hi, lo], [hi, hi], [lo, hi]], dtype=float)


@dataclass(frozen=True)
class AlignmentTemplate:
    """Target landmark positions and the crop square of the aligned frame.

    ``crop_corners`` are the outer pixel edges of the ``size x size`` crop,
    i.e. ``(-0.5, -0.5)`` to ``(size - 0.5, size - 0.5)`` in index coordinates.
    """

    targets: np.ndarray = field(default_factory=lambda: ARCFACE_112.copy())
    size: int = 112
    crop_corners: np.ndarray | None = None

    def __post_init__(self):
        targets = np.asarray(self.targets, dtype=float)
        if targets.shape != (5, 2):
            raise ShapeMismatch(f"template targets must be 5x2, got {targets.shape}")
        if not np.all((targets >= 0) & (targets < self.size)):
            raise ValueError("template targets must lie inside the aligned frame")
        object.__setattr__(self, "targets", targets)
        corners = self.crop_corners
        if corners is None:
            corners = _square_corners(self.size)
        corners = np.asarray(corners, dtype=float)
        if corners.shape != (4, 2):
            raise ShapeMismatch("crop_corners must be 4x2")
        object.__setattr__(self, "crop_corners", corners)

    def scaled(self, size):
        """Same template rescaled to a ``size x size`` aligned frame."""
        s = size / self.size
        return AlignmentTemplate(
            targets=(self.targets + 0.5) * s - 0.5,
            size=size,
            crop_corners=(self.crop_corners + 0.5) * s - 0.5,
        )


DEFAULT_TEMPLATE = AlignmentTemplate()


def check_landmarks(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.shape != (5, 2):
        raise ShapeMismatch(f"expected 5 landmark points (5x2), got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise DegenerateLandmarks("landmark coordinates must be finite")
    return pts


def check_affine(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (2, 3):
        raise ShapeMismatch(f"affine matrix must be 2x3, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SingularTransform("affine matrix has non-finite entries")
    return a


def _gauss_solve(m, rhs, exc=DegenerateLandmarks):
    """Solve ``m x = rhs`` by Gaussian elimination with partial pivoting."""
    a = np.array(m, dtype=float)
    b = np.array(rhs, dtype=float)
    n = a.shape[0]
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) < PIVOT_TOL:
            raise exc(f"pivot {abs(a[p, k]):.3e} below {PIVOT_TOL} in column {k}")
        if p != k:
            a[[k, p]] = a[[p, k]]
            b[[k, p]] = b[[p, k]]
        f = a[k + 1 :, k] / a[k, k]
        a[k + 1 :, k:] -= np.outer(f, a[k, k:])
        b[k + 1 :] -= np.outer(f, b[k]).reshape(b[k + 1 :].shape)
    x = np.zeros_like(b)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - a[k, k + 1 :] @ x[k + 1 :]) / a[k, k]
    return x


def _normalizer(pts):
    # similarity that centres the points and scales them to unit RMS radius
    c = pts.mean(axis=0)
    r = np.sqrt(np.mean(np.sum((pts - c) ** 2, axis=1)))
    if not r > 0:
        raise DegenerateLandmarks("all landmark points coincide")
    s = 1.0 / r
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]]])


def fit_affine(src, dst) -> np.ndarray:
    """Least-squares 6-dof affine ``A`` minimising ``sum ||dst_i - A src_i||^2``.

    Solved through the 6x6 normal equations. Source points are centred and
    scaled first so the pivot threshold is scale free; the minimiser itself
    does not depend on that reparametrisation.
    """
    src = check_landmarks(src)
    dst = check_landmarks(dst)
    t = _normalizer(src)
    p = apply_affine(t, src)
    design = np.zeros((10, 6))
    design[0::2, 0:2] = p
    design[0::2, 2] = 1.0
    design[1::2, 3:5] = p
    design[1::2, 5] = 1.0
    target = dst.reshape(-1)
    theta = _gauss_solve(design.T @ design, design.T @ target)
    return compose_affine(theta.reshape(2, 3), t)


def fit_similarity(src, dst) -> np.ndarray:
    """Least-squares 4-dof similarity (rotation, uniform scale, translation)."""
    src = check_landmarks(src)
    dst = check_landmarks(dst)
    t = _normalizer(src)
    p = apply_affine(t, src)
    design = np.zeros((10, 4))
    # [a -b tx; b a ty]
    design[0::2] = np.column_stack([p[:, 0], -p[:, 1], np.ones(5), np.zeros(5)])
    design[1::2] = np.column_stack([p[:, 1], p[:, 0], np.zeros(5), np.ones(5)])
    a, b, tx, ty = _gauss_solve(design.T @ design, design.T @ dst.reshape(-1))
    return compose_affine(np.array([[a, -b, tx], [b, a, ty]]), t)


def apply_affine(a, points) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    pts = np.asarray(points, dtype=float)
    return pts @ a[:, :2].T + a[:, 2]


def compose_affine(outer, inner) -> np.ndarray:
    """Affine equivalent to applying ``inner`` first, then ``outer``."""
    outer = np.asarray(outer, dtype=float)
    inner = np.asarray(inner, dtype=float)
    lin = outer[:, :2] @ inner[:, :2]
    return np.column_stack([lin, outer[:, :2] @ inner[:, 2] + outer[:, 2]])


def invert_affine(a) -> np.ndarray:
    a = check_affine(a)
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if abs(det) <= DET_TOL:
        raise SingularTransform(f"affine linear part has determinant {det:.3e}")
    inv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det
    return np.column_stack([inv, -inv @ a[:, 2]])


def perturb_affine(a, sigma, rng) -> np.ndarray:
    """Return ``a + G`` with ``G`` i.i.d. ``N(0, sigma^2)`` in all six entries."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    a = check_affine(a)
    return a + rng.normal(0.0, sigma, size=(2, 3))


class BilinearMap:
    """Sparse linear operator that bilinearly samples an image at given points.

    ``apply`` maps an ``(H, W, C)`` image to ``(out_h, out_w, C)``; ``vjp`` is
    the exact transpose, scattering output cotangents back onto input pixels.
    """

    def __init__(self, sample_x, sample_y, in_shape, border="zero"):
        h, w = in_shape
        out_shape = sample_x.shape
        sx = np.asarray(sample_x, dtype=float).ravel()
        sy = np.asarray(sample_y, dtype=float).ravel()
        if border == "clamp":
            sx = np.clip(sx, 0.0, w - 1.0)
            sy = np.clip(sy, 0.0, h - 1.0)
        elif border != "zero":
            raise ValueError(f"unknown border mode {border!r}")
        x0 = np.floor(sx)
        y0 = np.floor(sy)
        fx = sx - x0
        fy = sy - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        n = sx.size
        rows, cols, vals = [], [], []
        for dy, dx, wt in (
            (0, 0, (1 - fy) * (1 - fx)),
            (0, 1, (1 - fy) * fx),
            (1, 0, fy * (1 - fx)),
            (1, 1, fy * fx),
        ):
            xx = x0 + dx
            yy = y0 + dy
            ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h) & (wt != 0)
            rows.append(np.nonzero(ok)[0])
            cols.append(yy[ok] * w + xx[ok])
            vals.append(wt[ok])
        self.matrix = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, h * w),
        )
        self.in_shape = (h, w)
        self.out_shape = out_shape

    def apply(self, img):
        img = np.asarray(img, dtype=float)
        if img.shape[:2] != self.in_shape:
            raise ShapeMismatch(f"sampler expects {self.in_shape} input, got {img.shape[:2]}")
        c = img.shape[2]
        out = self.matrix @ img.reshape(-1, c)
        return out.reshape(*self.out_shape, c)

    def vjp(self, cotangent):
        g = np.asarray(cotangent, dtype=float)
        c = g.shape[2]
        back = self.matrix.T @ g.reshape(-1, c)
        return np.asarray(back).reshape(*self.in_shape, c)


def affine_sampler(a, in_shape, out_h, out_w, border="zero") -> BilinearMap:
    inv = invert_affine(a)
    v, u = np.mgrid[0:out_h, 0:out_w].astype(float)
    sx = inv[0, 0] * u + inv[0, 1] * v + inv[0, 2]
    sy = inv[1, 0] * u + inv[1, 1] * v + inv[1, 2]
    return BilinearMap(sx, sy, in_shape, border=border)


def warp_image(img, a, out_h, out_w) -> np.ndarray:
    """Output pixel ``(u, v)`` is the bilinear sample of ``img`` at ``A^-1 (u, v)``.

    Samples falling outside the input contribute zero.
    """
    img = np.asarray(img, dtype=float)
    if img.size == 0:
        raise ShapeMismatch("cannot warp an empty image")
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    out = affine_sampler(a, img.shape[:2], out_h, out_w).apply(img)
    return out[:, :, 0] if squeeze else out


def resize_affine(in_h, in_w, out_h, out_w) -> np.ndarray:
    """Pixel-edge aligned scaling (``align_corners=False`` convention)."""
    sx = out_w / in_w
    sy = out_h / in_h
    return np.array([[sx, 0.0, 0.5 * sx - 0.5], [0.0, sy, 0.5 * sy - 0.5]])


def crop_resize_affine(x0, y0, crop_w, crop_h, out_h, out_w) -> np.ndarray:
    """Affine taking the window with top-left pixel ``(x0, y0)`` onto an ``out_h x out_w`` grid."""
    sx = out_w / crop_w
    sy = out_h / crop_h
    return np.array(
        [[sx, 0.0, (0.5 - x0) * sx - 0.5], [0.0, sy, (0.5 - y0) * sy - 0.5]]
    )


@lru_cache(maxsize=64)
def _cached_sampler(key):
    a_bytes, in_shape, out_h, out_w, border = key
    a = np.frombuffer(a_bytes, dtype=float).reshape(2, 3)
    return affine_sampler(a, in_shape, out_h, out_w, border=border)


def cached_sampler(a, in_shape, out_h, out_w, border="zero") -> BilinearMap:
    """Memoised :func:`affine_sampler` for fixed geometric pipelines (resizes, crops)."""
    a = np.ascontiguousarray(a, dtype=float)
    return _cached_sampler((a.tobytes(), tuple(in_shape), out_h, out_w, border))


def resize_image(img, out_h, out_w) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    a = resize_affine(h, w, out_h, out_w)
    return cached_sampler(a, (h, w), out_h, out_w, border="clamp").apply(img)


def polygon_mask(vertices, h, w) -> np.ndarray:
    """Binary mask of pixel centres strictly inside a simple polygon."""
    poly = np.asarray(vertices, dtype=float)
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    inside = np.zeros((h, w), dtype=bool)
    on_edge = np.zeros((h, w), dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_int = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < x_int)
        cross = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
        within = (
            (xs >= min(x1, x2)) & (xs <= max(x1, x2))
            & (ys >= min(y1, y2)) & (ys <= max(y1, y2))
        )
        on_edge |= (cross == 0) & within
    return (inside & ~on_edge).astype(float)


def face_region_corners(a, template: AlignmentTemplate = DEFAULT_TEMPLATE) -> np.ndarray:
    """Corners of the aligned crop mapped back into the source image."""
    return apply_affine(invert_affine(a), template.crop_corners)


def face_prior_mask(a, template: AlignmentTemplate = DEFAULT_TEMPLATE, h=224, w=224) -> np.ndarray:
    """1 inside the source-image quadrilateral that alignment keeps, else 0.

    Vertices are clipped to the image's outer pixel edges before filling.
    """
    corners = face_region_corners(a, template)
    corners[:, 0] = np.clip(corners[:, 0], -0.5, w - 0.5)
    corners[:, 1] = np.clip(corners[:, 1], -0.5, h - 0.5)
    return polygon_mask(corners, h, w)


def aspect_ratio_prior(orig_h, orig_w, size=224) -> np.ndarray:
    """Region of a ``size x size`` resized input that survives a square centre crop.

    The centre crop is taken on the original image after scaling its shorter
    side to ``size``; here it is expressed in the aspect-distorting
    ``size x size`` resize that the noise predictor consumes.
    """
    side = min(orig_h, orig_w)
    mask = np.zeros((size, size))
    y_lo = (orig_h - side) / 2 / orig_h * size
    y_hi = (orig_h + side) / 2 / orig_h * size
    x_lo = (orig_w - side) / 2 / orig_w * size
    x_hi = (orig_w + side) / 2 / orig_w * size
    centres = np.arange(size) + 0.5
    rows = (centres > y_lo) & (centres < y_hi)
    cols = (centres > x_lo) & (centres < x_hi)
    mask[np.ix_(rows, cols)] = 1.0
    return mask
