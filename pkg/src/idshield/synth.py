"""Procedural face-like images with exact ground-truth landmarks."""
from __future__ import annotations

import numpy as np

# canonical landmark layout in units of the face's horizontal radius,
# image-left eye first, y pointing down
_CANONICAL = np.array(
    [
        [-0.36, -0.22],
        [0.36, -0.22],
        [0.0, 0.12],
        [-0.27, 0.42],
        [0.27, 0.42],
    ]
)


def _blob(xs, ys, cx, cy, r):
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * r * r))


def _segment(xs, ys, p, q, r):
    d = q - p
    t = np.clip(((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / (d @ d), 0.0, 1.0)
    px = p[0] + t * d[0]
    py = p[1] + t * d[1]
    return np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / (2.0 * r * r))


def _smooth_noise(rng, size, cells=4):
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size)
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    f = f * f * (3 - 2 * f)
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def synth_face(size=64, rng=None):
    """One ``size x size`` RGB face-like image and its five landmarks."""
    rng = rng if rng is not None else np.random.default_rng()
    ys, xs = np.mgrid[0:size, 0:size].astype(float)

    top = rng.uniform(0.2, 0.9, 3)
    bottom = rng.uniform(0.1, 0.8, 3)
    ramp = (ys / (size - 1))[:, :, None]
    img = top * (1 - ramp) + bottom * ramp
    img += 0.08 * _smooth_noise(rng, size)[:, :, None]

    centre = size / 2.0 + rng.uniform(-0.06, 0.06, 2) * size
    rx = size * rng.uniform(0.26, 0.32)
    ry = rx * rng.uniform(1.2, 1.35)
    theta = np.deg2rad(rng.uniform(-12.0, 12.0))
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])

    # face ellipse with a soft boundary
    u = (xs - centre[0]) * c + (ys - centre[1]) * s
    v = -(xs - centre[0]) * s + (ys - centre[1]) * c
    rho = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    face = 1.0 / (1.0 + np.exp((rho - 1.0) * size / 4.0))
    skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.7, 1.1) + rng.uniform(-0.05, 0.05, 3)
    shade = 1.0 + 0.06 * _smooth_noise(rng, size, cells=3)
    img = img * (1 - face[:, :, None]) + (skin * shade[:, :, None]) * face[:, :, None]

    pts = _CANONICAL * rx + rng.normal(0.0, 0.015 * rx, _CANONICAL.shape)
    pts = pts @ rot.T + centre

    feat_r = size / 40.0
    dark = np.zeros((size, size))
    for eye in pts[:2]:
        dark = np.maximum(dark, _blob(xs, ys, eye[0], eye[1], 1.6 * feat_r))
    dark = np.maximum(dark, 0.5 * _blob(xs, ys, pts[2, 0], pts[2, 1], 1.2 * feat_r))
    eye_col = rng.uniform(0.05, 0.3, 3)
    img = img * (1 - dark[:, :, None]) + eye_col * dark[:, :, None]

    mouth = _segment(xs, ys, pts[3], pts[4], 0.9 * feat_r)
    lip = np.array([0.65, 0.2, 0.25]) * rng.uniform(0.7, 1.1)
    img = img * (1 - mouth[:, :, None]) + lip * mouth[:, :, None]

    return np.clip(img, 0.0, 1.0), pts


def synth_faces(n, seed=0, size=64):
    """``n`` reproducible ``(image, landmarks)`` pairs."""
    if n < 1:
        raise ValueError("n must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n)
    return [synth_face(size, np.random.default_rng(ch)) for ch in children]
