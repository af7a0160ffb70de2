"""Command-line front end: ``semidense <subcommand> [flags]``.

Settings come from an optional ``--config`` file of ``key = value`` lines
(sections ``scene.``, ``match.``, ``arch.``, ``refiner.``, ``stochastic.``,
``train.``) overlaid by command-line flags, which always win.

Exit codes: 0 success, 1 I/O or data problem, 2 configuration error,
3 numerical failure (including a violated weighting guarantee).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import types
import typing
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigError, DatasetError, FormatError, NumericalError

log = logging.getLogger("semidense")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
SECTIONS = ("scene", "match", "arch", "refiner", "stochastic", "train")
# the likelihood settings that the ablation arm replaces with a flat 1 px
ABLATION_FIXED = ("sigma_in", "sigma_out", "sigma0", "reward_weight")


# configuration -----------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.split(".", 1)[0] not in SECTIONS or "." not in key:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} (sections: {', '.join(SECTIONS)})")
        out[key] = value
    return out


def _parse_value(kind, raw, key: str):
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)
    try:
        if origin in (typing.Union, types.UnionType):
            if raw.lower() == "none":
                return None
            return _parse_value(next(a for a in args if a is not type(None)), raw, key)
        if origin is tuple:
            parts = [p for p in raw.replace(",", " ").split()]
            item = args[0]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(item(p) for p in parts)
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return tuple(a(p) for a, p in zip(args, parts))
        if kind is bool:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError("expected a boolean")
            return low in ("1", "true", "yes", "on")
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def build(cls, settings: dict, section: str, **defaults):
    """Instantiate dataclass ``cls`` from the ``section.`` keys of ``settings``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = dict(defaults)
    prefix = section + "."
    for key, raw in settings.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            raise ConfigError(f"unknown setting {key!r}")
        kwargs[name] = _parse_value(hints[name], raw, key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def overlay(args: argparse.Namespace, flag_keys: dict[str, str]) -> dict:
    """Config file values, then every flag that was given on the command line."""
    settings = read_config(args.config) if getattr(args, "config", None) else {}
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None and value is not False:
            settings[key] = value
    return settings


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


# subcommands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .datagen import SceneConfig, gen_dataset

    settings = overlay(args, {"seed": "scene.seed", "width": "scene.width", "height": "scene.height", "dmin": "scene.d_min", "dmax": "scene.d_max"})
    cfg = build(SceneConfig, settings, "scene")
    if args.n < 0:
        raise ConfigError(f"--n must be non-negative, got {args.n}")
    records = gen_dataset(cfg, args.n, args.out)
    print(f"wrote {len(records)} pairs to {args.out}")
    return EXIT_OK


def cmd_match(args) -> int:
    from .imageio import read_png_gray, write_pfm
    from .matcher import MatchConfig, match_hierarchical, truncate_volume, write_volume

    settings = overlay(args, {"dmax": "match.d_max", "radius": "match.radius", "levels": "match.levels"})
    cfg = build(MatchConfig, settings, "match")
    if args.k < 0:
        raise ConfigError(f"--k must be non-negative, got {args.k}")
    left, right = read_png_gray(args.left), read_png_gray(args.right)
    if left.data.shape != right.data.shape:
        raise ConfigError(f"image sizes differ: {left.data.shape} vs {right.data.shape}")
    d_raw = match_hierarchical(left, right, cfg)
    write_pfm(d_raw, args.out)
    if args.cv_out:
        write_volume(truncate_volume(left, right, d_raw, args.k, cfg.radius, cfg.d_max, cfg.eps), args.cv_out)
    print(f"valid pixels: {int(d_raw.valid.sum())} of {d_raw.valid.size}")
    return EXIT_OK


def _stochastic(settings: dict, ablation: bool):
    from .bayes import StochasticConfig

    if not ablation:
        return build(StochasticConfig, settings, "stochastic")
    shared = {k: v for k, v in settings.items() if not k.startswith("stochastic.") or k.split(".", 1)[1] not in ABLATION_FIXED}
    base = StochasticConfig.baseline()
    return build(StochasticConfig, shared, "stochastic", **{k: getattr(base, k) for k in ABLATION_FIXED})


def _match_for(settings: dict, manifest) -> Optional[object]:
    from .datagen import read_manifest
    from .matcher import MatchConfig

    if not any(k.startswith("match.") for k in settings):
        return None
    records = read_manifest(manifest)
    d_max = int(math.ceil(records[0].d_max)) if records else 72
    return build(MatchConfig, settings, "match", d_max=d_max)


def cmd_train(args) -> int:
    from .refiner import Architecture, RefinerConfig, save_checkpoint
    from .trainer import TrainConfig, checkpoint_metadata, load_dataset, train, write_log

    settings = overlay(args, {
        "seed": "train.seed", "ablation": "train.ablation", "epochs": "train.epochs",
        "steps_per_epoch": "train.steps_per_epoch", "batch_size": "train.batch_size",
        "patch_size": "train.patch_size", "lr": "train.learning_rate",
    })
    settings["train.manifest"] = str(args.data)
    arch = build(Architecture, settings, "arch")
    config = build(TrainConfig, settings, "train")
    config.validate(arch)
    stochastic = _stochastic(settings, config.ablation)
    dataset = load_dataset(args.data, arch.K, _match_for(settings, args.data), args.cache_dir)
    refiner_config = build(RefinerConfig, settings, "refiner", d_max=dataset[0].d_max)
    result = train(dataset, arch, config, stochastic, refiner_config)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = checkpoint_metadata(config, stochastic, None)
    save_checkpoint(result.params, out, meta)
    if args.best_out:
        save_checkpoint(result.best_params, args.best_out, {**meta, "best_epoch": result.best_epoch})
    log_path = Path(args.log) if args.log else out.parent / "log.csv"
    write_log(result.history, log_path)
    last = result.history[-1]
    print(f"trained {config.epochs} epochs: nll={last['nll']:.4f} total={last['total']:.4f}; wrote {out} and {log_path}")
    return EXIT_OK


def _load_model(path):
    from .bayes import StochasticConfig
    from .refiner import load_checkpoint

    params, meta = load_checkpoint(path)
    ablation = meta.get("train.ablation", "False") == "True"
    stochastic = build(StochasticConfig, meta, "stochastic")
    return params, ablation, stochastic


def cmd_infer(args) -> int:
    from .imageio import read_png_gray, write_pfm, write_png_gray
    from .matcher import MatchConfig, match_hierarchical, truncate_volume
    from .refiner import RefinerInput, forward, mc_predict, predict_disparity

    if args.mc is not None and args.mc < 2:
        raise ConfigError(f"--mc needs at least 2 samples, got {args.mc}")
    params, ablation, _ = _load_model(args.ckpt)
    if ablation and args.pout_out:
        raise ConfigError("checkpoint was trained without the outlier branch; drop --pout-out")
    left, right = read_png_gray(args.left), read_png_gray(args.right)
    match = MatchConfig(d_max=int(math.ceil(params.config.d_max)))
    d_raw = match_hierarchical(left, right, match)
    vol = truncate_volume(left, right, d_raw, params.arch.K, match.radius, match.d_max, match.eps)
    # same float32 rounding as the training cache
    vol.slices = vol.slices.astype(np.float32).astype(np.float64)
    inp = RefinerInput(d_raw, vol)
    out = forward(inp, params, None, "mean", outlier_branch=not ablation)
    write_pfm(predict_disparity(d_raw, out), args.out)
    if args.pout_out:
        write_png_gray(out.p_out.data[0], args.pout_out, 16)
    if args.mc is not None:
        _, std, _ = mc_predict(inp, params, args.mc, seed=args.seed, outlier_branch=not ablation)
        std_path = args.std_out or str(Path(args.out).with_name(Path(args.out).stem + "_std.pfm"))
        write_pfm(np.where(d_raw.valid, std, 0.0).astype(np.float64), std_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evaluation as E
    from .trainer import load_dataset

    params, ablation, stochastic = _load_model(args.ckpt)
    if not 0 < args.threshold < 1:
        raise ConfigError(f"--threshold must be in (0, 1), got {args.threshold}")
    if args.mc != 0 and args.mc < 2:
        raise ConfigError(f"--mc needs 0 (off) or at least 2 samples, got {args.mc}")
    dataset = load_dataset(args.data, params.arch.K, None, args.cache_dir)
    ev = E.evaluate(params, dataset, args.threshold, tuple(args.t_e), args.mc, args.seed, stochastic, outlier_branch=not ablation)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    E.write_report_csv(ev, out / "report.csv")
    _write_rows(E.curve_summary_rows(ev.curves), out / "sparsification.csv")
    for (name, t_e), curve in ev.curves.items():
        E.write_curve_csv(curve, out / f"curve_{name}_te{t_e:g}.csv")
    if args.plots:
        E.plot_curves({k: c for k, c in ev.curves.items() if k[1] == args.t_e[0]}, out / "sparsification.svg")
        E.plot_inlier_histogram(ev.inlier_fractions, out / "inliers.svg")
    a = ev.aggregate
    print(f"mae_validated={E._fmt(a.mae_validated)} mae_all={E._fmt(a.mae_all)} raw_mae_validated={E._fmt(ev.raw_mae_validated)} inlier_fraction={a.inlier_fraction:.4f}")
    return EXIT_OK


def _write_rows(rows, path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)


def cmd_sparsify(args) -> int:
    from . import evaluation as E
    from .imageio import read_pfm

    pred, gt, score = read_pfm(args.pred), read_pfm(args.gt), read_pfm(args.score)
    if not pred.disparity.shape == gt.disparity.shape == score.disparity.shape:
        raise ConfigError("prediction, ground truth and score maps must share one size")
    mask = pred.valid & gt.valid
    curve = E.sparsification(pred.disparity, gt.disparity, score.disparity, args.t_e, mask=mask)
    if args.out:
        E.write_curve_csv(curve, args.out)
    rows = E.curve_summary_rows({("score", args.t_e): curve})
    print(" ".join(f"{k}={v}" for k, v in zip(rows[0][1:], rows[1][1:])))
    return EXIT_OK


def cmd_theory_check(args) -> int:
    from . import evaluation as E

    a, s, ok = E.theory_check(E.worked_example())
    print(f"worked example: a={a} s={s} verdict={ok}")
    bad = E.theory_sweep(args.n, args.seed)
    print(f"random instances: {args.n}, counterexamples: {len(bad)}")
    for inst in bad[:5]:
        print(f"  counterexample: {inst}")
    return EXIT_OK if ok and not bad else EXIT_NUMERIC


# parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semidense", description="Semi-dense active-stereo disparity refinement.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic speckle stereo dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of stereo pairs")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--width", type=int, help="image width [px]")
    p.add_argument("--height", type=int, help="image height [px]")
    p.add_argument("--dmin", type=float, help="smallest disparity [px]")
    p.add_argument("--dmax", type=float, help="largest disparity [px]")
    p.add_argument("--config", help="key = value settings file (scene.*)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("match", help="raw integer disparity and truncated cost volume")
    p.add_argument("--left", required=True, help="left image (grayscale PNG)")
    p.add_argument("--right", required=True, help="right image (grayscale PNG)")
    p.add_argument("--dmax", type=int, help="largest searched disparity [px]")
    p.add_argument("--out", required=True, help="raw disparity output (PFM, 0 = invalid)")
    p.add_argument("--cv-out", help="truncated cost volume output (SDCV)")
    p.add_argument("--k", type=int, default=3, help="half-width of the truncated volume [disparity steps]")
    p.add_argument("--radius", type=int, help="ZNCC window radius [px]")
    p.add_argument("--levels", type=int, help="pyramid levels")
    p.add_argument("--config", help="key = value settings file (match.*)")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", help="train the refinement network")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="checkpoint output (final epoch)")
    p.add_argument("--config", help="key = value settings file (train.*, stochastic.*, refiner.*, arch.*, match.*)")
    p.add_argument("--ablation", action="store_true", help="train without the outlier branch, 1 px likelihood")
    p.add_argument("--seed", type=int, help="seed for initialisation, patches and noise")
    p.add_argument("--epochs", type=_positive_int, help="number of epochs")
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=_positive_int, help="optimiser steps per epoch")
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int, help="patches per step")
    p.add_argument("--patch-size", dest="patch_size", type=_positive_int, help="patch side [px]")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--best-out", help="also write the lowest-loss epoch's checkpoint here")
    p.add_argument("--log", help="per-epoch CSV log (default: log.csv next to --out)")
    p.add_argument("--cache-dir", help="reuse matcher outputs stored here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="refine one stereo pair")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--left", required=True, help="left image (grayscale PNG)")
    p.add_argument("--right", required=True, help="right image (grayscale PNG)")
    p.add_argument("--out", required=True, help="refined disparity output (PFM)")
    p.add_argument("--pout-out", help="outlier probability output (16-bit PNG, p_out * 65535)")
    p.add_argument("--mc", type=int, help="Monte-Carlo samples for an epistemic std map (>= 2)")
    p.add_argument("--std-out", help="std map output (PFM, default <out>_std.pfm)")
    p.add_argument("--seed", type=int, default=0, help="Monte-Carlo seed")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics and sparsification on a dataset")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="dataset manifest with ground truth")
    p.add_argument("--out", required=True, help="output directory for CSV and SVG files")
    p.add_argument("--threshold", type=float, default=0.05, help="p_out threshold for validated pixels")
    p.add_argument("--t-e", dest="t_e", type=float, nargs="+", default=[0.2, 1.0], help="error thresholds [px]")
    p.add_argument("--mc", type=int, default=8, help="Monte-Carlo samples for the uncertainty scores (0 = off)")
    p.add_argument("--seed", type=int, default=0, help="Monte-Carlo seed")
    p.add_argument("--plots", action="store_true", help="write SVG plots")
    p.add_argument("--cache-dir", help="reuse matcher outputs stored here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sparsify", help="sparsification curve from PFM maps")
    p.add_argument("--pred", required=True, help="predicted disparity (PFM)")
    p.add_argument("--gt", required=True, help="ground-truth disparity (PFM)")
    p.add_argument("--score", required=True, help="per-pixel score, lower = more confident (PFM)")
    p.add_argument("--t-e", dest="t_e", type=float, default=0.2, help="error threshold [px]")
    p.add_argument("--out", help="curve CSV output (rho_d,f_pi)")
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("theory-check", help="check the outlier down-weighting guarantee")
    p.add_argument("--n", type=int, default=10_000, help="random instances")
    p.add_argument("--seed", type=int, default=0, help="sweep seed")
    p.set_defaults(func=cmd_theory_check)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, DatasetError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
