"""Command-line entry point: ``exposhift {train,enhance,eval,analyze-shift,selftest,make-synthetic}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from . import analysis, config, selftest
from .checkpoint import CheckpointError, load_checkpoint
from .data import IMAGE_SUFFIXES, DatasetError, DegradationSpec, scan_dataset, write_synthetic_dataset
from .imaging import ImageError, load_image, save_image
from .trainer import TrainingDiverged, evaluate, train

log = logging.getLogger("exposhift")


class UsageError(Exception):
    pass


def cmd_train(args) -> int:
    try:
        cfg = config.load_config(args.config)
    except config.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.output_dir is not None:
        cfg.train.output_dir = args.output_dir
    train_ds, val_ds = config.build_datasets(cfg)
    out = Path(cfg.train.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg.model, cfg.train, train_ds, cfg.loss, val_ds)
    last = result.log_rows[-1]
    print(f"trained {cfg.train.iterations} iterations; final loss {last['total']:.5f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise UsageError(f"no images in {path}")
        return files
    if not path.is_file():
        raise UsageError(f"input not found: {path}")
    return [path]


def cmd_enhance(args) -> int:
    model = load_checkpoint(args.checkpoint).build_model()
    inputs = _inputs(Path(args.input))
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for p in inputs:
            y = model.enhance(load_image(p)).clamp(0.0, 1.0)
            target = out_dir / (p.stem + ".png")
            save_image(y, target)
            print(target)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = scan_dataset(args.dataset, args.manifest)
    _, mean = evaluate(ckpt, ds, args.report)
    print(f"images {len(ds)}  PSNR {mean['psnr']:.3f}  SSIM {mean['ssim']:.4f}  RMSE-LAB {mean['rmse_lab']:.3f}")
    print(f"report: {args.report}")
    return 0


def cmd_analyze_shift(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    ds = scan_dataset(args.dataset, args.manifest)
    pairs = [ds.load(i) for i in range(len(ds))]
    result = analysis.pca_color_shift(pairs, args.samples, seed=args.seed, tau=args.tau)
    analysis.write_points(result, args.out)
    summary_path = Path(args.summary) if args.summary else Path(args.out).with_suffix(".json")
    analysis.write_summary(result, summary_path)
    dot = result.over_under_dot
    print(f"sampled {len(result.labels)} pixels; rank {result.rank}")
    for name, m in result.label_means.items():
        print(f"  mean projection [{name}]: ({m[0]:+.5f}, {m[1]:+.5f})")
    print(f"over/under mean-projection dot product: {dot:+.6f}")
    return 0


def cmd_selftest(args) -> int:
    results = selftest.run_all(perturb_kernel=args.debug_perturb_kernel)
    return 0 if all(r.passed for r in results) else 1


def cmd_make_synthetic(args) -> int:
    spec = DegradationSpec(seed=args.seed, noise_sigma=args.noise)
    root = write_synthetic_dataset(args.out, args.count, args.size, spec, seed=args.seed)
    print(f"wrote {args.count} pairs under {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exposhift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("--config", help=f"YAML config (default: ${config.CONFIG_ENV})")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance an image or a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", required=True, help="output directory")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR/SSIM/RMSE-LAB of a checkpoint on a paired dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="root with input/ and gt/")
    p.add_argument("--manifest", help="TSV of input<TAB>gt pairs relative to --dataset")
    p.add_argument("--report", required=True, help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-shift", help="PCA of over/under-exposure color shifts")
    p.add_argument("--dataset", required=True)
    p.add_argument("--manifest")
    p.add_argument("--samples", type=int, required=True, help="pixels sampled per image")
    p.add_argument("--out", required=True, help="CSV of projected points")
    p.add_argument("--summary", help="JSON summary path (default: --out with .json)")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze_shift)

    p = sub.add_parser("selftest", help="run operator-oracle and gradient checks")
    p.add_argument("--debug-perturb-kernel", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("make-synthetic", help="write a synthetic mixed-exposure dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train" and args.config is None and not os.environ.get(config.CONFIG_ENV):
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print("exposhift train: error: --config is required (or set $%s)" % config.CONFIG_ENV, file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, config.ConfigError) as exc:
        print(f"exposhift {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, CheckpointError, DatasetError, ImageError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"exposhift {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
