"""Command-line entry point: ``greyinput {gen,resize,compose-preview,train,grid,eval}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as X
from . import synth
from .compose import CONFIG_CODES, compose
from .descriptors import CODES, NAMES
from .errors import GreyInputError
from .layers import PREPROC_KINDS
from .losses import LOSSES
from .pgm import read_pgm, write_pgm
from .resample import BILINEAR_SUBMODES, InterpMethod, ResizePolicy, apply_policy, parse_target

log = logging.getLogger("greyinput")

METHODS = tuple(m.value for m in InterpMethod)


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _target(text: str) -> str:
    try:
        h, w = parse_target(text)
    except GreyInputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return f"{h}x{w}"


def _csv_list(text: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


# -- gen ------------------------------------------------------------------------


def cmd_gen(args) -> int:
    ds = synth.generate_dataset(args.n, args.seed, out_dir=args.out, canvas=parse_target(args.canvas))
    counts = ds.label_counts()
    print(f"manifest: {Path(args.out) / 'manifest.csv'}")
    if ds.regenerated:
        print(f"regenerated samples: {len(ds.regenerated)}")
    print(f"{'code':<8}{'name':<14}{'count':>6}")
    for code, c in zip(CODES, counts):
        print(f"{code:<8}{NAMES[code]:<14}{int(c):>6}")
    return 0


# -- resize / compose preview ----------------------------------------------------


def _policy_for(img: np.ndarray, target: str | None, mode: str) -> ResizePolicy:
    h, w = parse_target(target) if target else img.shape
    return ResizePolicy(h, w, X.MODE_ALIASES[mode])


def cmd_resize(args) -> int:
    img = read_pgm(args.input)
    policy = _policy_for(img, args.target, args.resize_mode)
    out = apply_policy(img, policy, InterpMethod(args.method), args.submode)
    write_pgm(args.output, out)
    print(f"{args.input} {img.shape[0]}x{img.shape[1]} -> {args.output} {out.shape[0]}x{out.shape[1]} "
          f"({args.method}, {args.resize_mode})")
    return 0


def cmd_compose_preview(args) -> int:
    img = read_pgm(args.input)
    policy = _policy_for(img, args.target, args.resize_mode)
    stack = compose(img, args.channels, policy)
    gap = np.ones((policy.target_h, 4))
    write_pgm(args.output, np.hstack([stack[0], gap, stack[1], gap, stack[2]]))
    print(f"{args.channels} preview ({policy.label}, {args.resize_mode}) -> {args.output}")
    return 0


# -- train / grid / eval ------------------------------------------------------------

_CONFIG_FLAGS = ("data", "gen_n", "gen_seed", "seed", "channels", "preproc", "loss", "resize_mode", "target",
                 "epochs_frozen", "epochs_finetune", "lr_frozen", "lr_min", "lr_max", "batch_size",
                 "dtype", "out")


def _add_config_args(p: argparse.ArgumentParser, grid: bool = False) -> None:
    p.add_argument("--config", help="INI file with an [experiment] section; flags override it")
    p.add_argument("--data", help="dataset directory with manifest.csv (default: generate in memory)")
    p.add_argument("--gen-n", type=_positive, help="samples to generate when --data is absent")
    p.add_argument("--gen-seed", type=int)
    p.add_argument("--seed", type=int)
    if not grid:
        p.add_argument("--channels", choices=CONFIG_CODES)
        p.add_argument("--preproc", choices=PREPROC_KINDS)
        p.add_argument("--loss", choices=tuple(LOSSES))
        p.add_argument("--resize-mode", choices=("squish", "aspect"))
        p.add_argument("--target", type=_target, help="HxW, e.g. 352x144")
    p.add_argument("--epochs-frozen", type=int)
    p.add_argument("--epochs-finetune", type=int)
    p.add_argument("--lr-frozen", type=float)
    p.add_argument("--lr-min", type=float)
    p.add_argument("--lr-max", type=float)
    p.add_argument("--batch-size", type=_positive)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--out", help="output directory")


def config_from_args(args) -> X.ExperimentConfig:
    base = X.ExperimentConfig.from_ini(args.config) if args.config else X.ExperimentConfig()
    values = {k: getattr(args, k, None) for k in _CONFIG_FLAGS}
    return X.ExperimentConfig.from_mapping(values, base)


def _print_row(row) -> None:
    print(f"epoch {row.epoch:3d} phase {row.phase} loss {row.mean_loss:.4f} "
          f"val_prauc {row.macro_prauc:.4f} t {row.wall_seconds:.0f}s", flush=True)


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    result = X.train_run(cfg, progress=_print_row)
    print(f"macro PRAUC {result.macro_prauc:.4f}; outputs in {result.out}")
    return 0


def cmd_grid(args) -> int:
    cfg = config_from_args(args)
    if args.out is None:
        cfg = replace(cfg, out="runs/grid")

    def report(row):
        print(f"{row['channels']} {row['preproc']} {row['loss']} {row['resolution']} r{row['repeat']}: "
              f"{row['status']} {row['macro_prauc']:.4f}", flush=True)

    result = X.run_grid(cfg, args.channels, args.preprocs, args.losses, args.resolutions, args.repeats,
                        cfg.out, progress=report)
    failed = [r for r in result["rows"] if r["status"] != "ok"]
    print(f"{len(result['rows'])} runs, {len(failed)} failed; tables in {cfg.out}")
    return 1 if failed else 0


def cmd_eval(args) -> int:
    metrics = X.eval_run(args.checkpoint, args.out, args.data, args.split, args.top_k)
    print(f"macro PRAUC {metrics['macro_prauc']:.4f} on {metrics['n_images']} images; outputs in {args.out}")
    return 0


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="greyinput", description="Greyscale input experiments on synthetic descriptor data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic descriptor dataset")
    p.add_argument("--n", type=_positive, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=_target, default=f"{synth.CANVAS[0]}x{synth.CANVAS[1]}")
    p.set_defaults(func=cmd_gen)

    for name, func, helptext in (("resize", cmd_resize, "resample one PGM"),
                                 ("compose-preview", cmd_compose_preview, "show the three input channels")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("input")
        p.add_argument("output")
        p.add_argument("--target", type=_target, help="HxW (default: input size)")
        p.add_argument("--resize-mode", choices=("squish", "aspect"), default="squish")
        if name == "resize":
            p.add_argument("--method", choices=METHODS, default="bilinear")
            p.add_argument("--submode", choices=BILINEAR_SUBMODES, default="antialiased")
        else:
            p.add_argument("--channels", choices=CONFIG_CODES, default="B-H-N")
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="train one model and write a run directory")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="train a grid of configurations and summarise it")
    _add_config_args(p, grid=True)
    p.add_argument("--channels", type=_csv_list, default=["B-H-N"])
    p.add_argument("--preprocs", type=_csv_list, default=["inc_d"])
    p.add_argument("--losses", type=_csv_list, default=["bce"])
    p.add_argument("--resolutions", type=_csv_list, default=["352x144:aspect", "224x224:squish"],
                   help="comma-separated HxW[:aspect|:squish]")
    p.add_argument("--repeats", type=_positive, default=2)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory (default: the run's own dataset)")
    p.add_argument("--split", choices=("val", "all"), default="val")
    p.add_argument("--top-k", type=_positive, default=10)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (GreyInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
