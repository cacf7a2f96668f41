"""Netpbm images, landmark text files and the flat ``key = value`` run config."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .geometry import check_landmarks


# -- images -----------------------------------------------------------------

def quantize(img) -> np.ndarray:
    """Unit-range floats to uint8 with round-half-up (error <= 0.5/255)."""
    x = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def _read_token(data, pos):
    while True:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def _parse_netpbm(data: bytes, magic: bytes, channels: int, path):
    tok, pos = _read_token(data, 0)
    if tok != magic:
        raise ValueError(f"{path}: not a binary {magic.decode()} file")
    try:
        fields = []
        for _ in range(3):
            tok, pos = _read_token(data, pos)
            fields.append(int(tok))
    except ValueError:
        raise ValueError(f"{path}: malformed header") from None
    w, h, maxval = fields
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise ValueError(f"{path}: unsupported header {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    n = w * h * channels
    raster = data[pos:pos + n]
    if len(raster) != n:
        raise ValueError(f"{path}: truncated raster ({len(raster)} of {n} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8).astype(float) / maxval
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P6", 3, path)


def read_pgm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P5", 1, path)


def ppm_bytes(img) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"PPM needs an HxWx3 image, got {img.shape}")
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes()


def pgm_bytes(mask) -> bytes:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeMismatch(f"PGM needs a 2-D array, got {mask.shape}")
    h, w = mask.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + quantize(mask).tobytes()


def write_ppm(path, img):
    Path(path).write_bytes(ppm_bytes(img))


def write_pgm(path, mask):
    Path(path).write_bytes(pgm_bytes(mask))


# -- landmarks --------------------------------------------------------------

def read_landmarks(path) -> np.ndarray:
    """Five ``x y`` lines (pixel-centre coordinates); ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected two numbers, got {line!r}") from None
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected two numbers, got {line!r}")
    try:
        return check_landmarks(np.array(rows))
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def landmarks_text(points) -> str:
    pts = check_landmarks(points)
    return "".join(f"{float(x)!r} {float(y)!r}\n" for x, y in pts)


def write_landmarks(path, points):
    Path(path).write_text(landmarks_text(points))


def dataset_pairs(directory):
    """Sorted ``(image_path, landmarks_path)`` pairs; ``face.ppm`` pairs with ``face.txt``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    pairs = []
    for img in sorted(directory.glob("*.ppm")):
        lm = img.with_suffix(".txt")
        if not lm.exists():
            raise FileNotFoundError(f"missing landmarks file {lm}")
        pairs.append((img, lm))
    return pairs


def load_dataset(directory):
    return [(read_ppm(i), read_landmarks(l)) for i, l in dataset_pairs(directory)]


# -- run config -------------------------------------------------------------

_SCALARS = {
    "epsilon": float, "step": float, "iters": int, "eot": int,
    "jitter_sigma": float, "seed": int, "eot_distortions": str,
    "train.total_steps": int, "train.batch_size": int,
    "train.lr_scale": float, "train.reg_scale": float, "train.stage_lr_scale": tuple,
}
_STAGE_FIELDS = ("epochs", "alphas", "beta1", "beta2", "epsilon", "lr")
_STAGE_KEY = re.compile(r"stage\.(\d+)\.(\w+)$")
_ALPHA_KEY = re.compile(r"alpha\.(\w+)$")


def _number(text, key, lineno):
    try:
        v = float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"line {lineno}: {key}: {text!r} is not a number") from None
    if not math.isfinite(v):
        raise ConfigError(f"line {lineno}: {key}: value must be finite")
    return v


@dataclass
class RunConfig:
    """Values parsed from a config file; ``None`` means "use the default"."""

    values: dict = field(default_factory=dict)
    alphas: dict = field(default_factory=dict)
    stages: list | None = None

    def get(self, key, default=None):
        return self.values.get(key, default)


def parse_config(text: str, branch_names=None) -> RunConfig:
    """Parse and validate a flat config; unknown keys raise :class:`ConfigError`.

    Numbers may be written as fractions (``2/37``). Curriculum stages use
    ``stage.N.<field>`` with fields epochs, alphas (comma separated), beta1,
    beta2, epsilon and lr; every stage must define all six.
    """
    from .predictor import CurriculumStage, check_stages

    cfg = RunConfig()
    stage_raw = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key in _SCALARS:
            kind = _SCALARS[key]
            if kind is str:
                cfg.values[key] = tuple(v.strip() for v in value.split(",") if v.strip())
                continue
            if kind is tuple:
                cfg.values[key] = tuple(_number(v, key, lineno) for v in value.split(","))
                continue
            if kind is int:
                try:
                    cfg.values[key] = int(value)
                except ValueError:
                    raise ConfigError(f"line {lineno}: {key} must be an integer") from None
            else:
                cfg.values[key] = _number(value, key, lineno)
        elif m := _STAGE_KEY.match(key):
            n, fname = int(m.group(1)), m.group(2)
            if fname not in _STAGE_FIELDS:
                raise ConfigError(f"line {lineno}: unknown stage field {fname!r}")
            if fname == "alphas":
                parsed = tuple(_number(v, key, lineno) for v in value.split(","))
            else:
                parsed = _number(value, key, lineno)
            stage_raw.setdefault(n, {})[fname] = parsed
        elif m := _ALPHA_KEY.match(key):
            name = m.group(1)
            if branch_names is not None and name not in branch_names:
                raise ConfigError(f"line {lineno}: unknown branch {name!r}")
            cfg.alphas[name] = _number(value, key, lineno)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")

    if stage_raw:
        numbers = sorted(stage_raw)
        if numbers != list(range(1, len(numbers) + 1)):
            raise ConfigError(f"stages must be numbered 1..N, got {numbers}")
        stages = []
        for n in numbers:
            missing = [f for f in _STAGE_FIELDS if f not in stage_raw[n]]
            if missing:
                raise ConfigError(f"stage {n} is missing {', '.join(missing)}")
            d = stage_raw[n]
            if d["epochs"] != int(d["epochs"]):
                raise ConfigError(f"stage {n}: epochs must be an integer")
            if branch_names is not None and len(d["alphas"]) != len(branch_names):
                raise ConfigError(f"stage {n}: {len(d['alphas'])} alphas for {len(branch_names)} branches")
            try:
                stages.append(CurriculumStage(int(d["epochs"]), d["alphas"], d["beta1"],
                                              d["beta2"], d["epsilon"], d["lr"]))
            except ValueError as exc:
                raise ConfigError(f"stage {n}: {exc}") from None
        try:
            cfg.stages = check_stages(stages)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def read_config(path, branch_names=None) -> RunConfig:
    try:
        return parse_config(Path(path).read_text(), branch_names)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def stages_text(stages) -> str:
    """Config-file rendering of curriculum stages (round-trips through :func:`parse_config`)."""
    out = []
    for n, st in enumerate(stages, start=1):
        out.append(f"stage.{n}.epochs = {st.epochs}")
        out.append(f"stage.{n}.alphas = " + ", ".join(repr(a) for a in st.alphas))
        for f in ("beta1", "beta2", "epsilon", "lr"):
            out.append(f"stage.{n}.{f} = {getattr(st, f)!r}")
    return "\n".join(out) + "\n"
