"""Command-line entry point.

Subcommands: gen-data (synthetic corpus), train (two-phase experiment),
predict (pseudo-label + uncertainty dumps), eval (metrics report).

Exit codes: 2 bad flags, 3 IO failure, 4 numerical abort, 5 checkpoint
version mismatch.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config
from .data import (DataError, SceneSpec, generate_corpus, read_pgm,
                   read_ppm, write_pgm)
from .langevin import ChainDivergenceError
from .metrics import DEFAULT_XI_SQ, MetricError, confidence_quality, f_max, mae
from .rng import RngStream
from .tensor import NonFiniteError
from .trainer import TrainingError, load_state, predict_maps, run_experiment

EXIT_FLAGS = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_VERSION = 5


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ebmseg")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, required=True)
    g.add_argument("--n-test", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--low-contrast", type=float, default=0.25)

    t = sub.add_parser("train", help="run the two-phase experiment")
    t.add_argument("--config", default=None)
    t.add_argument("--data-dir", default=None)
    t.add_argument("--out-dir", default=None)
    t.add_argument("--ratio", default=None)
    t.add_argument("--train-seed", type=int, default=None)
    t.add_argument("--split-seed", type=int, default=None)
    t.add_argument("--phase1-iters", type=int, default=None)
    t.add_argument("--phase2-iters", type=int, default=None)
    t.add_argument("--np-mode", action="store_true", default=None)

    r = sub.add_parser("predict", help="dump prediction/uncertainty maps")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--images", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--J", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    return p


def cmd_gen_data(args) -> int:
    try:
        spec = SceneSpec(size=args.size,
                         low_contrast_fraction=args.low_contrast)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    try:
        manifest = generate_corpus(spec, args.out, args.n_train, args.n_test,
                                   args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(manifest.entries)} image/mask pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        overrides = {}
        for flag, key in (("data_dir", "data_dir"), ("out_dir", "out_dir"),
                          ("ratio", "ratio"), ("train_seed", "train_seed"),
                          ("split_seed", "split_seed"),
                          ("phase1_iters", "phase1_iters"),
                          ("phase2_iters", "phase2_iters"),
                          ("np_mode", "np_mode")):
            value = getattr(args, flag)
            if value is not None:
                overrides[key] = value
        if overrides:
            cfg = replace(cfg, **overrides)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    try:
        run_experiment(cfg)
    except (DataError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, ChainDivergenceError, NonFiniteError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def cmd_predict(args) -> int:
    try:
        state, cfg = load_state(args.ckpt)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        names = sorted(n for n in os.listdir(args.images)
                       if n.endswith(".ppm"))
        if not names:
            raise DataError(f"no .ppm images in {args.images}")
        xs = np.stack([
            read_ppm(os.path.join(args.images, n)).astype(np.float64)
            .transpose(2, 0, 1) / 255.0 for n in names])
        os.makedirs(args.out, exist_ok=True)
        stream = RngStream(args.seed)
        preds, uncs = predict_maps(state, cfg, xs, stream, j_passes=args.J,
                                   tag="predict-prior")
        for i, name in enumerate(names):
            stem = os.path.splitext(name)[0]
            write_pgm(os.path.join(args.out, f"{stem}_pred.pgm"),
                      np.rint(preds[i, 0] * 255.0).astype(np.uint8))
            write_pgm(os.path.join(args.out, f"{stem}_unc.pgm"),
                      np.rint(uncs[i, 0] * 255.0).astype(np.uint8))
    except (DataError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, ChainDivergenceError, NonFiniteError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {len(names)} prediction/uncertainty pairs to {args.out}")
    return 0


def cmd_eval(args) -> int:
    try:
        pred_names = sorted(n for n in os.listdir(args.pred)
                            if n.endswith("_pred.pgm"))
        ids = [n[:-len("_pred.pgm")] for n in pred_names]
        missing = [i for i in ids
                   if not os.path.exists(os.path.join(args.gt, i + ".pgm"))]
        if missing or not ids:
            print("missing ground-truth for: " + ", ".join(missing or ["*"]),
                  file=sys.stderr)
            return EXIT_IO
        preds = np.stack([
            read_pgm(os.path.join(args.pred, n)).astype(np.float64) / 255.0
            for n in pred_names])
        gts = np.stack([
            (read_pgm(os.path.join(args.gt, i + ".pgm")) == 255)
            .astype(np.float64) for i in ids])
        fm, _ = f_max(preds, gts)
        m = mae(preds, gts)
        unc_rows = []
        unc_paths = [os.path.join(args.pred, i + "_unc.pgm") for i in ids]
        if all(os.path.exists(p) for p in unc_paths):
            uncs = np.stack([read_pgm(p).astype(np.float64) / 255.0
                             for p in unc_paths])
            try:
                cq = confidence_quality(uncs, preds, gts)
                unc_rows.append(("model", "confidence_quality", f"{cq:.17g}"))
            except MetricError:
                pass
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            f.write(f"# xi_sq={DEFAULT_XI_SQ} aggregation=pooled\n")
            writer = csv.writer(f)
            writer.writerow(["model", "metric", "value"])
            writer.writerow(["model", "f_max", f"{fm:.17g}"])
            writer.writerow(["model", "mae", f"{m:.17g}"])
            for row in unc_rows:
                writer.writerow(row)
    except (DataError, MetricError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"report written to {args.out}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "predict": cmd_predict,
        "eval": cmd_eval,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
