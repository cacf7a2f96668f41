"""``idshield`` command line: protect, evaluate, train-predictor, predict, synth-faces.

Exit codes: 0 success, 2 malformed input or arguments, 3 optimisation error,
4 non-finite training loss.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import files, metrics
from .encoders import default_branches
from .errors import ConfigError, IDShieldError, NonFiniteLoss
from .losses import LossWeights
from .pgd import DEFAULT_EPSILON, DEFAULT_ITERATIONS, DEFAULT_JITTER_SIGMA, PgdConfig, pgd_protect
from .predictor import DEFAULT_STAGES, PredictorModel, TrainOptions, protect, train
from .synth import synth_faces

log = logging.getLogger("idshield")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_OPTIM = 3
EXIT_NONFINITE = 4


class InputError(Exception):
    """Raised for unreadable or malformed user input; maps to exit code 2."""


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _unit_float(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0.0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _float_list(text):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not all(v > 0 and math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"values must be positive and finite, got {text!r}")
    return vals


def _kinds(text):
    return tuple(k.strip() for k in text.split(",") if k.strip())


def thread_count():
    raw = os.environ.get("IDSHIELD_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"IDSHIELD_THREADS must be an integer, got {raw!r}") from None


def _load(fn, *args):
    try:
        return fn(*args)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None


def _write_text(path, text):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _config(args, branch_names):
    if getattr(args, "config", None) is None:
        return files.RunConfig()
    return _load(files.read_config, args.config, branch_names)


def _pick(args, cfg, name, key, default):
    """Explicit flag, else config value, else the built-in default."""
    v = getattr(args, name)
    if v is not None:
        return v
    return cfg.get(key, default)


def _pgd_setup(args, cfg, branches):
    eps = _pick(args, cfg, "epsilon", "epsilon", DEFAULT_EPSILON)
    alphas = tuple(cfg.alphas.get(b.name, b.weight) for b in branches)
    try:
        pcfg = PgdConfig(
            epsilon=eps,
            step=_pick(args, cfg, "step", "step", None),
            iterations=_pick(args, cfg, "iters", "iters", DEFAULT_ITERATIONS),
            eot_samples=_pick(args, cfg, "eot", "eot", 1),
            jitter_sigma=_pick(args, cfg, "jitter_sigma", "jitter_sigma", DEFAULT_JITTER_SIGMA),
            seed=_pick(args, cfg, "seed", "seed", 0),
            eot_distortions=_pick(args, cfg, "eot_distortions", "eot_distortions", ()),
        )
        w = LossWeights(alphas, epsilon=eps)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return pcfg, w


# -- commands -----------------------------------------------------------------

def cmd_protect(args):
    branches = default_branches()
    cfg = _config(args, [b.name for b in branches])
    pcfg, w = _pgd_setup(args, cfg, branches)
    img = _load(files.read_ppm, args.input)
    pts = _load(files.read_landmarks, args.landmarks)
    log.info("protect %s: eps=%g step=%g iters=%d eot=%d", args.input, pcfg.epsilon,
             pcfg.step, pcfg.iterations, pcfg.eot_samples)
    out, trace = pgd_protect(img, pts, branches, w, pcfg)
    files.write_ppm(args.out, out)
    if args.trace:
        _write_text(args.trace, trace.to_csv())
    log.info("mean cosine %.4f -> %.4f", np.mean(trace.cosines[0]), np.mean(trace.cosines[-1]))
    return EXIT_OK


def _make_protector(args, branches, cfg):
    if args.protector == "predictor":
        if args.model is None:
            raise InputError("--protector predictor needs --model")
        model = _load(lambda p: PredictorModel.from_bytes(Path(p).read_bytes()), args.model)
        eps = _pick(args, cfg, "epsilon", "epsilon", DEFAULT_EPSILON)
        return lambda img, lm: protect(model, img, lm, eps)
    pcfg, w = _pgd_setup(args, cfg, branches)

    def run(img, lm):
        return pgd_protect(img, lm, branches, w, pcfg)[0]
    return run


def cmd_evaluate(args):
    branches = default_branches()
    cfg = _config(args, [b.name for b in branches])
    data = _load(files.load_dataset, args.data)
    if not data:
        raise InputError(f"{args.data}: no .ppm images found")
    protector = _make_protector(args, branches, cfg)
    seed = _pick(args, cfg, "seed", "seed", 0)
    threads = thread_count()
    rng = np.random.default_rng(seed)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = metrics.robustness_report(data, protector, branches, rng, map_fn=pool.map)
    else:
        rows = metrics.robustness_report(data, protector, branches, rng)
    _write_text(args.out, metrics.report_to_csv(rows))
    for row, _ in metrics.REPORT_ROWS:
        vals = [r["mean_ism"] for r in rows if r["distortion"] == row]
        print(f"{row}\t{np.mean(vals):.4f}")
    return EXIT_OK


def cmd_train_predictor(args):
    branches = default_branches()
    cfg = _config(args, [b.name for b in branches])
    if args.stages is not None:
        stage_cfg = _load(files.read_config, args.stages, [b.name for b in branches])
        if stage_cfg.stages is None:
            raise InputError(f"{args.stages}: no stage.N.* keys")
        stages = stage_cfg.stages
    else:
        stages = cfg.stages or list(DEFAULT_STAGES)
        if cfg.stages is None:
            log.info("using the built-in curriculum:\n%s", files.stages_text(stages))
    data = _load(files.load_dataset, args.data)
    if not data:
        raise InputError(f"{args.data}: no .ppm images found")
    seed = _pick(args, cfg, "seed", "seed", 0)
    opts = TrainOptions(
        batch_size=_pick(args, cfg, "batch_size", "train.batch_size", 4),
        total_steps=_pick(args, cfg, "steps", "train.total_steps", None),
        lr_scale=_pick(args, cfg, "lr_scale", "train.lr_scale", 1.0),
        stage_lr_scale=_pick(args, cfg, "stage_lr_scale", "train.stage_lr_scale", None),
        reg_scale=_pick(args, cfg, "reg_scale", "train.reg_scale", 1.0),
        seed=seed,
    )
    if opts.stage_lr_scale is not None and len(opts.stage_lr_scale) != len(stages):
        raise InputError(f"stage_lr_scale has {len(opts.stage_lr_scale)} values for {len(stages)} stages")
    model = PredictorModel(seed=seed)
    model, tlog = train(model, data, branches, stages, opts)
    Path(args.out).write_bytes(model.to_bytes())
    if args.log:
        _write_text(args.log, tlog.to_csv())
    log.info("trained %d steps (warm-up %d); final loss %.5f", len(tlog.rows),
             tlog.warmup_steps, tlog.rows[-1]["loss"] if tlog.rows else float("nan"))
    return EXIT_OK


def cmd_predict(args):
    model = _load(lambda p: PredictorModel.from_bytes(Path(p).read_bytes()), args.model)
    img = _load(files.read_ppm, args.input)
    pts = _load(files.read_landmarks, args.landmarks)
    out = protect(model, img, pts, args.epsilon)
    files.write_ppm(args.out, out)
    return EXIT_OK


def cmd_synth_faces(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (img, pts) in enumerate(synth_faces(args.n, args.seed, args.size)):
        files.write_ppm(out / f"face_{i:04d}.ppm", img)
        files.write_landmarks(out / f"face_{i:04d}.txt", pts)
    log.info("wrote %d faces to %s", args.n, out)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _pgd_flags(p):
    p.add_argument("--epsilon", type=_unit_float, help=f"L-inf budget (default {DEFAULT_EPSILON})")
    p.add_argument("--step", type=float, help="PGD step size (default epsilon/10)")
    p.add_argument("--iters", type=_positive_int, help=f"PGD iterations (default {DEFAULT_ITERATIONS})")
    p.add_argument("--eot", type=_positive_int, help="EoT samples per step (default 1)")
    p.add_argument("--jitter-sigma", dest="jitter_sigma", type=_nonneg_float,
                   help=f"alignment jitter std (default {DEFAULT_JITTER_SIGMA})")
    p.add_argument("--eot-distortions", dest="eot_distortions", type=_kinds,
                   help="comma-separated EoT distortions (identity,jpeg,crop,noise,resize,affine)")
    p.add_argument("--seed", type=_seed)
    p.add_argument("--config", help="key = value run config")


def build_parser():
    parser = argparse.ArgumentParser(prog="idshield", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("protect", help="PGD-protect one image")
    p.add_argument("--input", required=True, help="input PPM (P6)")
    p.add_argument("--landmarks", required=True, help="five 'x y' lines")
    p.add_argument("--out", required=True, help="output PPM")
    p.add_argument("--trace", help="per-iteration loss CSV")
    _pgd_flags(p)
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("evaluate", help="robustness report over a directory of faces")
    p.add_argument("--data", required=True, help="directory of NAME.ppm + NAME.txt pairs")
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--protector", choices=("pgd", "predictor"), default="pgd")
    p.add_argument("--model", help="predictor model file (for --protector predictor)")
    _pgd_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-predictor", help="curriculum-train the noise predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--stages", help="config file with stage.N.* keys (default: built-in curriculum)")
    p.add_argument("--log", help="training log CSV")
    p.add_argument("--steps", type=_positive_int, help="total steps, split across stages by epochs")
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p.add_argument("--lr-scale", dest="lr_scale", type=_nonneg_float)
    p.add_argument("--stage-lr-scale", dest="stage_lr_scale", type=_float_list,
                   help="comma-separated per-stage learning-rate multipliers")
    p.add_argument("--reg-scale", dest="reg_scale", type=_nonneg_float)
    p.add_argument("--seed", type=_seed)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("predict", help="apply a trained predictor to one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=_unit_float, default=DEFAULT_EPSILON)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth-faces", help="write procedural faces and landmark files")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_faces)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InputError, ConfigError, FileNotFoundError) as exc:
        print(f"idshield: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonFiniteLoss as exc:
        print(f"idshield: non-finite loss: {exc} (step={exc.step}, stage={exc.stage})",
              file=sys.stderr)
        return EXIT_NONFINITE
    except (IDShieldError, ArithmeticError, ValueError) as exc:
        print(f"idshield: optimisation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OPTIM


if __name__ == "__main__":
    sys.exit(main())
