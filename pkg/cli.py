"""
Command-line interface for the volseg toolkit (console script `volseg`).
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np
import pandas as pd

import config
import data_processor
import db_handler
import tensor_core as tc
from boundary_loss import dfb_map
from eval_infer import MetricsReport, sliding_window_infer
from gradcheck import SUITES, run_suites
from seg_net import load_checkpoint
from trainer import AblationConfig, TrainConfig, ablate, dice_gap, train
from utils import format_shape, parse_shape
from volumes import (PhantomConfig, min_max_scale, phantom_config_dict, read_array, read_mask,
                     synth_generate, write_array, write_dataset)

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Malformed configuration or arguments; reported with exit code 2."""


def _shape(text: str):
    try:
        return parse_shape(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _load_config(cls, path: str):
    try:
        return cls.from_json(path)
    except json.JSONDecodeError as e:
        raise UsageError(f"malformed config {path}: {e}") from e
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config {path}: {e}") from e


def cmd_synth(args) -> int:
    cfg = PhantomConfig(noise_sigma=args.noise, spacing=args.spacing)
    samples = synth_generate(args.seed, args.count, args.shape, cfg)
    write_dataset(samples, args.out, extra={"seed": args.seed, "spacing": args.spacing,
                                            "phantom": phantom_config_dict(cfg)})
    fractions = [s.foreground_fraction for s in samples]
    print(f"wrote {len(samples)} volumes of {format_shape(args.shape)} to {args.out} "
          f"(foreground {100 * min(fractions):.1f}-{100 * max(fractions):.1f}%)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(TrainConfig, args.config)
    cfg.out = args.out
    if args.data:
        cfg.data_dir = args.data
    result = train(cfg, resume=args.resume, progress=args.progress)
    final = result.curve.iloc[-1]
    db_handler.record_run(kind="train", variant=cfg.loss_mode, seed=cfg.seed, checkpoint=cfg.out,
                          metrics={"final_total": float(final["total"]), "final_ce": float(final["ce"])},
                          run_config=cfg.to_dict(), db_file=args.db)
    print(f"trained {cfg.iterations} iterations, final loss {final['total']:.5f}, checkpoint {cfg.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    params = load_checkpoint(args.ckpt)
    image, sidecar = read_array(args.volume)
    if image.ndim != 3:
        raise ValueError(f"{args.volume} is not a 3D volume (shape {image.shape})")
    prob = sliding_window_infer(params, min_max_scale(image), args.window, args.stride, workers=args.workers)
    write_array(prob, args.out, {"spacing": sidecar.get("spacing", config.DEFAULT_SPACING),
                                 "checkpoint": os.path.abspath(args.ckpt)})
    print(f"wrote probabilities {format_shape(prob.shape)} to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, truth = read_mask(args.pred), read_mask(args.truth)
    report = MetricsReport(run_config={"pred": args.pred, "truth": args.truth, "spacing": args.spacing})
    row = report.add_case(os.path.basename(args.pred), pred, truth, args.spacing)
    report.save_json(args.out)
    report.save_csv(os.path.splitext(args.out)[0] + ".csv")
    print(f"dice {row['dice']:.4f} jaccard {row['jaccard']:.4f} hd95 {row['hd95']:.4f} assd {row['assd']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    ablation = _load_config(AblationConfig, args.config)
    if args.workers:
        ablation.workers = args.workers
    if args.db:
        ablation.registry = args.db
    table = ablate(ablation, args.out)
    print(data_processor.format_ablation_table(table).to_string(index=False))
    for setting in ablation.settings:
        gap = dice_gap(table, setting)
        if gap is not None:
            print(f"+ All (k=5) vs baseline mean Dice ({setting}): {gap:+.2f} points")
    return EXIT_OK


def cmd_dfbmap(args) -> int:
    mask = read_mask(args.mask)
    weights = dfb_map(mask, args.k)
    write_array(weights.weights.astype(np.float64), args.out, {"k": args.k})
    print(f"wrote DFB weights (k={args.k}, max {weights.weights.max():.0f}) to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = list(SUITES) if args.module == "all" else [args.module]
    results = run_suites(names, args.seed)
    for r in results:
        status = "ok" if r.passed else "FAILED"
        print(f"{r.name}: max relative error {r.max_rel_error:.3e} (tolerance {r.tolerance:.0e}) {status}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_runs(args) -> int:
    history = db_handler.get_run_history(args.limit, db_file=args.db)
    if not history:
        print("no runs recorded")
        return EXIT_OK
    rows = [{k: v for k, v in h.items() if k not in ("config", "metrics")} | h["metrics"] for h in history]
    with pd.option_context("display.width", 160, "display.max_columns", 20):
        print(pd.DataFrame(rows).to_string(index=False))
    return EXIT_OK


def cmd_report(args) -> int:
    table = data_processor.read_report(args.table)
    if {"method", "setting", "dice_mean"} <= set(table.columns):
        table = data_processor.format_ablation_table(table)
    with open(args.out, "wb") as f:
        f.write(data_processor.generate_excel(table, sheet_name=args.sheet).getvalue())
    print(f"wrote {len(table)} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volseg", description="Volumetric segmentation toolkit with shuffle-then-reorder attention and boundary-weighted losses",
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help="logging level")
    parser.add_argument("--precision", choices=["float64", "float32"], default=config.PRECISION,
                        help="scalar precision for tensors")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a phantom dataset", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--shape", type=_shape, default=config.DEFAULT_VOLUME_SHAPE, help="HxWxD")
    p.add_argument("--noise", type=float, default=0.1, help="noise sigma relative to contrast")
    p.add_argument("--spacing", type=float, default=config.DEFAULT_SPACING, help="voxel spacing in mm")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network from a JSON config", formatter_class=fmt)
    p.add_argument("--config", required=True, help="JSON document with TrainConfig fields")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--data", help="dataset directory (overrides the config)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--db", help="run registry path (default: %s)" % config.REGISTRY_FILE)
    p.add_argument("--progress", action="store_true", help="show a progress bar")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window inference on one volume", formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--volume", required=True, help="volume file (.json/.raw stem)")
    p.add_argument("--window", type=_shape, default=config.DEFAULT_CROP_SHAPE, help="HxWxD")
    p.add_argument("--stride", type=_shape, default=None, help="HxWxD (default: half the window)")
    p.add_argument("--workers", type=int, default=1, help="threads for window predictions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a prediction against ground truth", formatter_class=fmt)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--spacing", type=float, default=config.DEFAULT_SPACING, help="voxel spacing in mm")
    p.add_argument("--out", required=True, help="report JSON (a CSV is written next to it)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation grid", formatter_class=fmt)
    p.add_argument("--config", required=True, help="JSON document with AblationConfig fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=0, help="parallel processes (0: use the config)")
    p.add_argument("--db", help="run registry path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dfbmap", help="export the DFB weight map of a mask", formatter_class=fmt)
    p.add_argument("--mask", required=True)
    p.add_argument("--k", type=int, default=config.DEFAULT_DFB_K)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dfbmap)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=fmt)
    p.add_argument("--module", choices=["all"] + list(SUITES), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("runs", help="list recorded runs", formatter_class=fmt)
    p.add_argument("--db", help="run registry path")
    p.add_argument("--limit", type=int, default=20)
    p.set_defaults(func=cmd_runs)

    p = sub.add_parser("report", help="export an ablation table to Excel", formatter_class=fmt)
    p.add_argument("--table", required=True, help="ablation table CSV")
    p.add_argument("--out", required=True, help="output .xlsx")
    p.add_argument("--sheet", default="Ablation")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        logging.getLogger().setLevel(args.log_level.upper())
        tc.set_precision(args.precision)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
