"""Command-line entry point: gen, train, predict, eval, schedule."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, ModelConfig
from .data import DataError, gen_synthetic, load_dataset, load_images, read_gray, save_dataset
from .fsd import build_schedule
from .train import DivergenceError, evaluate, export_predictions, predict, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

log = logging.getLogger("fspnet")


def _cmd_gen(args) -> int:
    try:
        samples = gen_synthetic(args.count, args.size, args.size, args.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    names = save_dataset(samples, args.out)
    print(f"wrote {len(names)} samples to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = ModelConfig.load(args.config)
    dataset = load_dataset(args.data)
    try:
        result = train(
            config,
            dataset,
            out_dir=args.out,
            on_step=lambda s, v: log.info("step %d loss %.6f", s, v),
        )
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained {result.checkpoint.step} steps, final loss {last:.6f}")
    print(f"checkpoint: {os.path.join(args.out, 'final.ckpt')}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    names, images = load_images(args.images)
    try:
        maps = predict(ckpt, images, laterals=True)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    export_predictions(maps[:, -1], names, args.out, maps[:, :-1] if args.dump_laterals else None)
    print(f"wrote {len(names)} maps to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    dataset = load_dataset(args.data)
    maps = None
    if args.preds:
        # reuse exported maps; they are already 8-bit so re-quantizing is a no-op
        maps = np.stack([read_gray(os.path.join(args.preds, f"{n}.png")) for n in dataset.names])
    try:
        report = evaluate(ckpt, dataset, maps=maps)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    report.write(args.report)
    agg = report.aggregate()
    print(" ".join(f"{k}={v:.4f}" for k, v in agg.items()))
    return EXIT_OK


def _cmd_schedule(args) -> int:
    print(build_schedule().table(grid=args.grid))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fspnet", description="Desk-scale camouflaged object detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic camouflage dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    pr = sub.add_parser("predict", help="write P3 probability maps as PNG")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--images", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--dump-laterals", action="store_true", help="also write P0..P2")
    pr.set_defaults(func=_cmd_predict)

    e = sub.add_parser("eval", help="score a checkpoint on a labelled dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help=".json or .csv")
    e.add_argument("--preds", help="directory of previously exported maps to score instead")
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("schedule", help="show the decoder wiring")
    s.add_argument("--dump", action="store_true", required=True)
    s.add_argument("--grid", type=int, default=6, help="token grid side for the resolution columns")
    s.set_defaults(func=_cmd_schedule)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
