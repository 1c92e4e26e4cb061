"""Command-line entry point: ``vitcomer <command> [options]``.

Exit codes: 0 when every check passes, 1 when a check fails, 2 on usage or
configuration errors.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, harness
from .autodiff import ShapeError
from .config import ConfigError, RunConfig, load_run_config, parse_lines
from .model import VARIANTS
from .pgm import PATTERNS, ImageError, image_to_input, pattern, read_pnm

EXIT_USAGE = 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value run configuration file")
    p.add_argument("--seed", type=int, help="seed for weights, inputs and the synthetic set")
    p.add_argument("--dtype", choices=("f32", "f64"), help="floating-point precision")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitcomer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("shapes", help="check pyramid and token shapes on a random input")
    _common(p)
    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    _common(p)
    p.add_argument("--eps", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--samples", type=int, help="entries per parameter tensor (0 = all)")
    p = sub.add_parser("equiv-init", help="ViT-branch tokens vs a plain ViT at initialization")
    _common(p)
    p.add_argument("--set-alpha", type=float, help="overwrite every gate before comparing")
    p = sub.add_parser("oracle", help="kernels vs brute-force loop oracles")
    _common(p)
    p.add_argument("--seeds", type=int)
    p = sub.add_parser("params", help="parameter accounting for a named variant")
    _common(p)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--allocate", action="store_true", help="also build the model and count")
    p = sub.add_parser("train-toy", help="overfit the synthetic segmentation set")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p = sub.add_parser("export-features", help="write channel-mean feature maps as PGM")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", required=True,
                   help=f"PGM/PPM path or a pattern name ({', '.join(PATTERNS)})")
    return parser


def resolve_config(args, default_dtype: str = "f64") -> RunConfig:
    """File (or defaults), then command-line overrides."""
    explicit = set()
    if args.config is not None:
        run = load_run_config(args.config)
        explicit = set(parse_lines(args.config.read_text(encoding="utf-8")))
    else:
        run = RunConfig()
    model = run.model
    dtype = args.dtype or (model.dtype if "dtype" in explicit else default_dtype)
    changes = {"dtype": dtype}
    if args.seed is not None:
        changes["seed"] = args.seed
        run = replace(run, data_seed=args.seed)
    try:
        model = model.with_(**changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return replace(run, model=model)


def run_command(args) -> harness.Report:
    cmd = args.command
    if cmd == "train-toy":
        run = resolve_config(args, default_dtype="f32")
        overrides = {k: getattr(args, k) for k in ("steps", "lr") if getattr(args, k) is not None}
        run = replace(run, **overrides)
        return harness.cmd_train_toy(run, args.out, log=lambda s: print(s, file=sys.stderr))
    run = resolve_config(args)
    seed = run.model.seed
    if cmd == "shapes":
        return harness.cmd_shapes(run.model, seed)
    if cmd == "gradcheck":
        eps = args.eps if args.eps is not None else run.eps
        tol = args.tol if args.tol is not None else run.tol
        samples = args.samples if args.samples is not None else run.grad_samples
        return harness.gradcheck_model(run.model, eps, tol, samples, seed)
    if cmd == "equiv-init":
        return harness.cmd_equiv_init(run.model, seed, args.set_alpha)
    if cmd == "oracle":
        seeds = args.seeds if args.seeds is not None else run.oracle_seeds
        return harness.cmd_oracle(seeds, run.oracle_tol, seed, run.model.mrfp_kernels)
    if cmd == "params":
        cfg = run.model
        if args.variant is not None:
            cfg = type(cfg).from_variant(args.variant, dtype=cfg.dtype)
        return harness.cmd_params(cfg, True if args.allocate else None)
    if cmd == "export-features":
        model = checkpoint.load(args.checkpoint)
        cfg = model.cfg
        if args.image in PATTERNS:
            image = pattern(args.image, cfg.img_h, cfg.img_w, seed, cfg.np_dtype)
        else:
            image = image_to_input(read_pnm(args.image), cfg.np_dtype)
        return harness.cmd_export_features(model, image, args.out)
    raise ConfigError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = run_command(args)
    except (ConfigError, ShapeError, ImageError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    sys.stdout.write(report.text())
    sys.stdout.flush()
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
