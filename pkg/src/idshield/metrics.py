"""Image quality and identity-similarity measurements."""
from __future__ import annotations

import csv
import io
import math

import numpy as np
from scipy.ndimage import correlate1d

from .augment import distortion_suite_with_geometry
from .encoders import branch_features
from .errors import ShapeMismatch, TooSmall
from .geometry import apply_affine
from .losses import cosine_sim

REPORT_HEADER = ("distortion", "branch", "mean_ism", "std_ism", "n")
REPORT_ROWS = (
    ("P", None),
    ("P+Affine", "affine"),
    ("P+JPEG", "jpeg"),
    ("P+Crop", "crop"),
    ("P+Noisy", "noisy"),
)

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _same_shape(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images; ``inf`` when identical."""
    a, b = _same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    return g / g.sum()


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if min(a.shape[:2]) < SSIM_WIN:
        raise TooSmall(f"SSIM needs both sides >= {SSIM_WIN}, got {a.shape[:2]}")
    g = gaussian_window()
    r = SSIM_WIN // 2

    def blur(x):
        y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return y[r:-r, r:-r]

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    vals = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(smap.mean())
    return float(np.mean(vals))


def ism_proxy(branch, clean, protected, landmarks=None, protected_landmarks=None) -> float:
    """Cosine between a branch's features of the clean and the protected image.

    Stands in for identity-score matching without a generator in the loop.
    """
    e_clean = branch_features(branch, clean, landmarks)[0]
    pts = landmarks if protected_landmarks is None else protected_landmarks
    e_prot = branch_features(branch, protected, pts)[0]
    return cosine_sim(e_clean, e_prot)


def _suite_ism(branches, clean, protected, landmarks, seed):
    """ISM per (row, branch) for one image; clean and protected share each distortion draw."""
    out = {}
    for b in branches:
        out[("P", b.name)] = ism_proxy(b, clean, protected, landmarks)
    suite_c = distortion_suite_with_geometry(clean, np.random.default_rng(seed))
    suite_p = distortion_suite_with_geometry(protected, np.random.default_rng(seed))
    label = {name: row for row, name in REPORT_ROWS if name}
    for (name, dc, aff), (_, dp, _) in zip(suite_c, suite_p):
        pts = landmarks
        if aff is not None and landmarks is not None:
            pts = apply_affine(aff, landmarks)
        for b in branches:
            out[(label[name], b.name)] = ism_proxy(b, dc, dp, pts)
    return out


def robustness_report(samples, protector, branches, rng, map_fn=map) -> list:
    """Mean/std ISM per distortion row and branch over a set of images.

    ``samples`` is a sequence of ``(image, landmarks)``; ``protector`` maps
    ``(image, landmarks)`` to a protected image. Rows come out in the fixed
    order P, P+Affine, P+JPEG, P+Crop, P+Noisy, branches in given order.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("robustness_report needs at least one image")
    seeds = rng.integers(0, 2**63, size=len(samples))

    def one(job):
        (img, lm), seed = job
        prot = protector(img, lm)
        return _suite_ism(branches, img, prot, lm, int(seed))

    per_image = list(map_fn(one, zip(samples, seeds)))
    rows = []
    for row, _ in REPORT_ROWS:
        for b in branches:
            vals = np.array([r[(row, b.name)] for r in per_image])
            rows.append({
                "distortion": row,
                "branch": b.name,
                "mean_ism": float(vals.mean()),
                "std_ism": float(vals.std()),
                "n": len(vals),
            })
    return rows


def report_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in rows:
        writer.writerow([r["distortion"], r["branch"], f"{r['mean_ism']:.6f}",
                         f"{r['std_ism']:.6f}", r["n"]])
    return buf.getvalue()
