"""Feed-forward adversarial noise predictor and its curriculum training loop.

The network is a two-block patch mixer over a 5-channel input (RGB, face
localisation prior, centre-crop prior)::

    tokens = tanh(patchify(x) @ W_in + b_in)
    tokens = tokens + tanh(T @ tokens)          # token mixing
    tokens = tokens + tanh(tokens @ C)          # channel mixing
    delta  = eps * tanh(unpatchify(tokens @ W_out + b_out))

so ``|delta| <= eps`` holds for every parameter setting.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .blobs import PREDICTOR_MAGIC, pack_arrays, unpack_arrays
from .encoders import patchify, unpatchify
from .errors import EmptyDataset, NonFiniteLoss, ShapeMismatch
from .losses import LossWeights, clean_features, evaluate, reg_grad, reg_loss

logger = logging.getLogger(__name__)

PARAM_NAMES = ("w_in", "b_in", "token_mix", "channel_mix", "w_out", "b_out")
IN_CHANNELS = 5
OUT_CHANNELS = 3
WARMUP_STEPS = 2500
GRAD_CLIP = 10.0
TRAIN_JITTER_SIGMA = 0.003


@dataclass(frozen=True)
class CurriculumStage:
    epochs: int
    alphas: tuple
    beta1: float
    beta2: float
    epsilon: float
    lr: float

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        vals = (self.epochs, self.beta1, self.beta2, self.epsilon, self.lr, *self.alphas)
        if any(not v > 0 for v in vals):
            raise ValueError(f"curriculum values must be positive: {self}")

    def weights(self, **kw) -> LossWeights:
        return LossWeights.from_stage(self, **kw)


# alpha_1..alpha_4 weight IP-Adapter, IP-Adapter-Plus, PhotoMaker, InstantID
DEFAULT_STAGES = (
    CurriculumStage(120, (2 / 37, 14 / 37, 20 / 37, 1 / 37), 9e-3, 1e-3, 0.05, 1e-2),
    CurriculumStage(20, (4 / 16, 2 / 16, 9 / 16, 2 / 16), 1.8e-3, 2e-4, 0.04, 2e-5),
    CurriculumStage(20, (2 / 14, 2 / 14, 9 / 14, 1 / 14), 4.5e-4, 5e-5, 0.035, 2e-5),
)


def check_stages(stages):
    stages = list(stages)
    if not stages:
        raise ValueError("at least one curriculum stage is required")
    for prev, nxt in zip(stages, stages[1:]):
        if nxt.epsilon > prev.epsilon:
            raise ValueError("epsilon must not increase across curriculum stages")
    return stages


def allocate_steps(stages, total_steps):
    """Split ``total_steps`` across stages in proportion to their epochs (largest remainder)."""
    epochs = np.array([s.epochs for s in stages], dtype=float)
    share = epochs / epochs.sum() * total_steps
    steps = np.floor(share).astype(int)
    for i in np.argsort(-(share - steps), kind="stable")[: total_steps - steps.sum()]:
        steps[i] += 1
    return [int(s) for s in steps]


def warmup_length(total_steps, cap=WARMUP_STEPS):
    return max(1, min(cap, total_steps // 10))


class PredictorModel:
    """Parameters and manual forward/backward of the noise predictor."""

    def __init__(self, image_size=224, patch_size=16, hidden_dim=64, seed=0, params=None):
        if image_size % patch_size:
            raise ShapeMismatch("image_size must be a multiple of patch_size")
        self.image_size = image_size
        self.patch_size = patch_size
        self.hidden_dim = hidden_dim
        n = self.num_tokens
        fan_in = patch_size * patch_size * IN_CHANNELS
        fan_out = patch_size * patch_size * OUT_CHANNELS
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                "w_in": rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, hidden_dim)),
                "b_in": np.zeros(hidden_dim),
                "token_mix": rng.normal(0.0, 0.5 / math.sqrt(n), (n, n)),
                "channel_mix": rng.normal(0.0, 0.5 / math.sqrt(hidden_dim), (hidden_dim, hidden_dim)),
                "w_out": rng.normal(0.0, 0.5 / math.sqrt(hidden_dim), (hidden_dim, fan_out)),
                "b_out": np.zeros(fan_out),
            }
        expected = {
            "w_in": (fan_in, hidden_dim), "b_in": (hidden_dim,), "token_mix": (n, n),
            "channel_mix": (hidden_dim, hidden_dim), "w_out": (hidden_dim, fan_out),
            "b_out": (fan_out,),
        }
        for k, shape in expected.items():
            if np.shape(params[k]) != shape:
                raise ShapeMismatch(f"{k}: expected {shape}, got {np.shape(params[k])}")
        self.params = {k: np.array(params[k], dtype=float) for k in PARAM_NAMES}

    @property
    def num_tokens(self):
        return (self.image_size // self.patch_size) ** 2

    def copy(self):
        return PredictorModel(self.image_size, self.patch_size, self.hidden_dim, params=self.params)

    def forward(self, x5, epsilon):
        """Perturbation for a ``(S, S, 5)`` input, plus a cache for :meth:`backward`."""
        p = self.params
        s = self.image_size
        if x5.shape != (s, s, IN_CHANNELS):
            raise ShapeMismatch(f"expected ({s}, {s}, {IN_CHANNELS}) input, got {x5.shape}")
        xp = patchify(x5, self.patch_size)
        h0 = np.tanh(xp @ p["w_in"] + p["b_in"])
        a1 = np.tanh(p["token_mix"] @ h0)
        h1 = h0 + a1
        a2 = np.tanh(h1 @ p["channel_mix"])
        h2 = h1 + a2
        t = np.tanh(h2 @ p["w_out"] + p["b_out"])
        delta = epsilon * unpatchify(t, s, s, self.patch_size, OUT_CHANNELS)
        return delta, (xp, h0, a1, h1, a2, h2, t, epsilon)

    def backward(self, cache, d_delta):
        """Parameter gradients given ``dL/d delta`` at model resolution."""
        xp, h0, a1, h1, a2, h2, t, eps = cache
        p = self.params
        d_t = patchify(np.asarray(d_delta, dtype=float), self.patch_size) * eps
        d_o = d_t * (1.0 - t * t)
        g = {"w_out": h2.T @ d_o, "b_out": d_o.sum(axis=0)}
        d_h2 = d_o @ p["w_out"].T
        d_z2 = d_h2 * (1.0 - a2 * a2)
        g["channel_mix"] = h1.T @ d_z2
        d_h1 = d_h2 + d_z2 @ p["channel_mix"].T
        d_z1 = d_h1 * (1.0 - a1 * a1)
        g["token_mix"] = d_z1 @ h0.T
        d_h0 = d_h1 + p["token_mix"].T @ d_z1
        d_z0 = d_h0 * (1.0 - h0 * h0)
        g["w_in"] = xp.T @ d_z0
        g["b_in"] = d_z0.sum(axis=0)
        return g

    def to_bytes(self) -> bytes:
        meta = np.array([self.image_size, self.patch_size, self.hidden_dim], dtype=float)
        return pack_arrays(PREDICTOR_MAGIC, [meta] + [self.params[k] for k in PARAM_NAMES])

    @classmethod
    def from_bytes(cls, data):
        meta, *arrays = unpack_arrays(PREDICTOR_MAGIC, data)
        size, patch, hidden = (int(v) for v in meta)
        return cls(size, patch, hidden, params=dict(zip(PARAM_NAMES, arrays)))


def compute_priors(img_shape, landmarks, template=geometry.DEFAULT_TEMPLATE, size=224):
    """Face-localisation and centre-crop prior masks at model resolution."""
    h, w = img_shape[:2]
    to_model = geometry.resize_affine(h, w, size, size)
    pts = geometry.apply_affine(to_model, geometry.check_landmarks(landmarks))
    a = geometry.fit_affine(pts, template.targets)
    face = geometry.face_prior_mask(a, template, size, size)
    return face, geometry.aspect_ratio_prior(h, w, size)


def _model_input(model, img, face_prior, ar_prior):
    img = np.asarray(img, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"expected an RGB image, got shape {img.shape}")
    s = model.image_size
    for name, m in (("face_prior", face_prior), ("ar_prior", ar_prior)):
        if np.shape(m) != (s, s):
            raise ShapeMismatch(f"{name} must be {s}x{s}, got {np.shape(m)}")
    small = geometry.resize_image(img, s, s)
    return np.concatenate([small, np.asarray(face_prior)[:, :, None],
                           np.asarray(ar_prior)[:, :, None]], axis=2)


def _back_sampler(model, shape):
    h, w = shape[:2]
    s = model.image_size
    if (h, w) == (s, s):
        return None
    return geometry.cached_sampler(geometry.resize_affine(s, s, h, w), (s, s), h, w, border="clamp")


def predict(model, img, face_prior, ar_prior, epsilon) -> np.ndarray:
    """Perturbation for ``img`` at its own resolution, bounded by ``epsilon``."""
    x5 = _model_input(model, img, face_prior, ar_prior)
    delta, _ = model.forward(x5, epsilon)
    back = _back_sampler(model, np.shape(img))
    if back is None:
        return delta
    # interpolation weights sum to 1 only up to rounding; saturated tanh can overshoot by an ulp
    return np.clip(back.apply(delta), -epsilon, epsilon)


def protect(model, img, landmarks, epsilon, template=geometry.DEFAULT_TEMPLATE):
    """Add the predicted perturbation to ``img`` and clip to the unit range."""
    face, ar = compute_priors(np.shape(img), landmarks, template, model.image_size)
    return np.clip(np.asarray(img, dtype=float) + predict(model, img, face, ar, epsilon), 0.0, 1.0)


# -- training ----------------------------------------------------------------

@dataclass
class TrainOptions:
    batch_size: int = 4
    total_steps: int | None = None  # None: run each stage's epochs over the data
    lr_scale: float = 1.0
    stage_lr_scale: tuple | None = None  # extra per-stage multipliers on top of lr_scale
    reg_scale: float = 1.0  # multiplies beta1/beta2; ell-1 norms are raw sums
    jitter_sigma: float = TRAIN_JITTER_SIGMA
    grad_clip: float = GRAD_CLIP
    warmup_cap: int = WARMUP_STEPS
    seed: int = 0


@dataclass
class TrainLog:
    warmup_steps: int
    grad_clip: float
    stages: list
    stage_steps: list
    rows: list = field(default_factory=list)

    COLUMNS = ("step", "stage", "loss", "adv", "reg", "lr", "grad_norm")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.rows:
            writer.writerow([r["step"], r["stage"]] + [repr(float(r[k])) for k in self.COLUMNS[2:]])
        return buf.getvalue()

    def column(self, name, stage=None):
        return np.array([r[name] for r in self.rows if stage is None or r["stage"] == stage])


class _Sample:
    __slots__ = ("img", "landmarks", "x5", "back", "clean")

    def __init__(self, model, img, landmarks, branches, template):
        self.img = np.asarray(img, dtype=float)
        self.landmarks = geometry.check_landmarks(landmarks)
        face, ar = compute_priors(self.img.shape, self.landmarks, template, model.image_size)
        self.x5 = _model_input(model, self.img, face, ar)
        self.back = _back_sampler(model, self.img.shape)
        self.clean = clean_features(self.img, branches, self.landmarks)


def sample_loss_grad(model, sample, branches, w, rng, jitter_sigma):
    """Loss for one image and its gradients with respect to the model parameters."""
    delta_m, cache = model.forward(sample.x5, w.epsilon)
    delta = delta_m if sample.back is None else sample.back.apply(delta_m)
    x = sample.img + delta
    inside = (x >= 0.0) & (x <= 1.0)
    protected = np.clip(x, 0.0, 1.0)
    adv_only = replace(w, beta1=0.0, beta2=0.0)
    ev = evaluate(sample.img, protected - sample.img, branches, sample.landmarks, adv_only, rng,
                  jitter_sigma=jitter_sigma, clean=sample.clean)
    g_delta = np.where(inside, ev.grad, 0.0) + reg_grad(delta, w)
    if sample.back is not None:
        g_delta = sample.back.vjp(g_delta)
    reg = reg_loss(delta, w)
    return ev.adv + reg, ev.adv, reg, model.backward(cache, g_delta)


def train(model, dataset, branches, stages=DEFAULT_STAGES, opts=None, template=geometry.DEFAULT_TEMPLATE):
    """Curriculum SGD on the protection objective. Returns ``(model, log)``.

    The input model is not modified. Learning rate warms up linearly from
    zero over ``min(2500, total_steps // 10)`` steps; the global gradient
    L2 norm is clipped at ``opts.grad_clip``.
    """
    opts = opts or TrainOptions()
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("training needs at least one (image, landmarks) pair")
    stages = check_stages(stages)
    for st in stages:
        if len(st.alphas) != len(branches):
            raise ValueError(f"stage has {len(st.alphas)} alphas for {len(branches)} branches")
    stage_mult = tuple(opts.stage_lr_scale) if opts.stage_lr_scale is not None else (1.0,) * len(stages)
    if len(stage_mult) != len(stages) or not all(m > 0 and math.isfinite(m) for m in stage_mult):
        raise ValueError(f"stage_lr_scale needs {len(stages)} positive values, got {opts.stage_lr_scale}")
    if opts.total_steps is None:
        per_epoch = math.ceil(len(dataset) / opts.batch_size)
        stage_steps = [st.epochs * per_epoch for st in stages]
    else:
        stage_steps = allocate_steps(stages, opts.total_steps)
    total = sum(stage_steps)
    warm = warmup_length(total, opts.warmup_cap)
    log = TrainLog(warm, opts.grad_clip, list(stages), stage_steps)
    for i, st in enumerate(stages):
        logger.info("stage %d: %d steps, %s", i + 1, stage_steps[i], st)

    model = model.copy()
    samples = [_Sample(model, img, lm, branches, template) for img, lm in dataset]
    rng = np.random.default_rng(opts.seed)
    order = []
    step = 0
    for si, (st, n_steps) in enumerate(zip(stages, stage_steps), start=1):
        w = st.weights()
        if opts.reg_scale != 1.0:
            w = replace(w, beta1=w.beta1 * opts.reg_scale, beta2=w.beta2 * opts.reg_scale)
        for _ in range(n_steps):
            batch = []
            while len(batch) < min(opts.batch_size, len(samples)):
                if not order:
                    order = list(rng.permutation(len(samples)))
                batch.append(order.pop())
            grads = {k: np.zeros_like(v) for k, v in model.params.items()}
            loss = adv = reg = 0.0
            for idx in batch:
                l, a, r, g = sample_loss_grad(model, samples[idx], branches, w, rng, opts.jitter_sigma)
                loss += l
                adv += a
                reg += r
                for k in grads:
                    grads[k] += g[k]
            nb = len(batch)
            loss, adv, reg = loss / nb, adv / nb, reg / nb
            gnorm = math.sqrt(sum(float(np.sum((g / nb) ** 2)) for g in grads.values()))
            if not (math.isfinite(loss) and math.isfinite(gnorm)):
                raise NonFiniteLoss(
                    f"non-finite loss {loss} / grad norm {gnorm} at step {step} (stage {si})",
                    step=step, stage=si,
                )
            scale = 1.0 / nb
            if gnorm > opts.grad_clip:
                scale *= opts.grad_clip / gnorm
            lr = st.lr * opts.lr_scale * stage_mult[si - 1] * min(1.0, step / warm)
            for k in model.params:
                model.params[k] -= lr * scale * grads[k]
            log.rows.append({"step": step, "stage": si, "loss": loss, "adv": adv,
                             "reg": reg, "lr": lr, "grad_norm": gnorm})
            step += 1
    return model, log
