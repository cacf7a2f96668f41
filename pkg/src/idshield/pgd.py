"""Per-image projected sign-gradient descent on the identity objective."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .augment import EOT_KINDS, EotAugmenter
from .errors import ShapeMismatch
from .losses import LossWeights, clean_features, evaluate

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.035
DEFAULT_ITERATIONS = 100
DEFAULT_JITTER_SIGMA = 0.003


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = DEFAULT_EPSILON
    step: float | None = None  # defaults to epsilon / 10
    iterations: int = DEFAULT_ITERATIONS
    eot_samples: int = 1
    jitter_sigma: float = DEFAULT_JITTER_SIGMA
    seed: int = 0
    eot_distortions: tuple = ()

    def __post_init__(self):
        if self.step is None:
            object.__setattr__(self, "step", self.epsilon / 10.0)
        vals = (self.epsilon, self.step, self.jitter_sigma)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("PGD parameters must be finite")
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not 0 < self.step <= 2 * self.epsilon:
            raise ValueError(f"step must lie in (0, 2*epsilon], got {self.step}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        kinds = tuple(self.eot_distortions)
        if set(kinds) - set(EOT_KINDS):
            raise ValueError(f"unknown EoT distortions {kinds}")
        object.__setattr__(self, "eot_distortions", kinds)

    @property
    def stochastic(self):
        return self.jitter_sigma > 0 or bool(self.eot_distortions)


@dataclass
class PgdTrace:
    """Loss history; row ``k`` describes the iterate after ``k`` steps (row 0 is the input)."""

    branch_names: list
    total_loss: list = field(default_factory=list)
    adv_loss: list = field(default_factory=list)
    cosines: list = field(default_factory=list)
    linf: list = field(default_factory=list)

    def record(self, ev, linf):
        self.total_loss.append(ev.total)
        self.adv_loss.append(ev.adv)
        self.cosines.append(list(ev.cosines))
        self.linf.append(linf)

    def __len__(self):
        return len(self.total_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "total_loss", "adv_loss"]
                        + [f"cossim_{n}" for n in self.branch_names] + ["linf"])
        for k in range(len(self)):
            writer.writerow([k, repr(float(self.total_loss[k])), repr(float(self.adv_loss[k]))]
                            + [repr(float(c)) for c in self.cosines[k]]
                            + [repr(float(self.linf[k]))])
        return buf.getvalue()


def project(x_adv, x, epsilon) -> np.ndarray:
    """Clamp ``x_adv`` into ``[x - eps, x + eps]`` intersected with ``[0, 1]``."""
    x_adv = np.asarray(x_adv, dtype=float)
    x = np.asarray(x, dtype=float)
    if x_adv.shape != x.shape:
        raise ShapeMismatch(f"{x_adv.shape} vs {x.shape}")
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)


def pgd_protect(img, landmarks, branches, w: LossWeights, cfg: PgdConfig):
    """Protect one image; returns ``(protected, trace)``.

    Each step moves against the sign of the loss gradient, averaged over
    ``cfg.eot_samples`` draws of alignment jitter (and of ``cfg.eot_distortions``
    when set), then projects back onto the epsilon ball.
    """
    if not np.isclose(cfg.epsilon, w.epsilon, rtol=0, atol=1e-15):
        raise ValueError(f"PGD epsilon {cfg.epsilon} != loss epsilon {w.epsilon}")
    img = np.asarray(img, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    augment = EotAugmenter(rng, cfg.eot_distortions) if cfg.eot_distortions else None
    clean = clean_features(img, branches, landmarks)
    trace = PgdTrace([b.name for b in branches])

    x = img.copy()
    ev = evaluate(img, x - img, branches, landmarks, w, clean=clean, need_grad=not cfg.stochastic)
    trace.record(ev, 0.0)
    for k in range(cfg.iterations):
        if cfg.stochastic:
            grad = np.zeros_like(img)
            for _ in range(cfg.eot_samples):
                grad += evaluate(img, x - img, branches, landmarks, w, rng,
                                 jitter_sigma=cfg.jitter_sigma, clean=clean,
                                 augment=augment).grad
            grad /= cfg.eot_samples
        else:
            grad = ev.grad
        x = project(x - cfg.step * np.sign(grad), img, cfg.epsilon)
        need = not cfg.stochastic and k + 1 < cfg.iterations
        ev = evaluate(img, x - img, branches, landmarks, w, clean=clean, need_grad=need)
        trace.record(ev, float(np.max(np.abs(x - img))))
    logger.debug("pgd: adv loss %.4f -> %.4f", trace.adv_loss[0], trace.adv_loss[-1])
    return x, trace
