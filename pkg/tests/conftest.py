import numpy as np
import pytest

from idshield.encoders import default_branches
from idshield.synth import synth_faces


@pytest.fixture(scope="session")
def branches():
    return default_branches()


@pytest.fixture(scope="session")
def faces():
    return synth_faces(4, seed=11, size=64)


def rel_err(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_fd(f, x, v, h=1e-5):
    """Central difference of ``f`` at ``x`` along ``v``."""
    return (f(x + h * v) - f(x - h * v)) / (2.0 * h)


def random_landmarks(rng, size):
    """Jittered canonical face layout scaled to a ``size`` image."""
    base = np.array([[0.35, 0.4], [0.65, 0.4], [0.5, 0.55], [0.38, 0.72], [0.62, 0.72]])
    return base * size + rng.normal(0.0, 0.02 * size, base.shape)
