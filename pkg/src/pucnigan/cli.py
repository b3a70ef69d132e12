"""Command-line entry point: ``pucnigan {make-data,run,grid,eval,plot}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from . import plotting
from .cgan import ConfigError
from .datasets import DataError
from .pu_core import TrainingAborted
from .trainer import read_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ABORT = 0, 2, 3, 4


def _make_data(args):
    overrides = dict(positive_rate=args.positive_rate, unlabeled_dist=args.dist, seed=args.seed)
    if args.data_root:
        overrides["data_root"] = args.data_root
    if args.positive_classes:
        overrides["positive_classes"] = json.loads(args.positive_classes)
    cfg = ex.default_config(args.dataset, **overrides)
    if args.dataset == "synthetic":
        cfg.synthetic = ex.SyntheticConfig(args.K, args.dim, args.separation, args.n_per_class)
        cfg = ex.resolve(cfg)
    out = args.out or f"data/{args.dataset}_rate{args.positive_rate:g}_{args.dist}_seed{args.seed}"
    manifest = ex.make_data(cfg, out, allow_download=args.allow_download)
    print(json.dumps(manifest, indent=2, sort_keys=True))


def _run(args):
    cfg = ex.load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    state = ex.run_experiment(cfg, resume=args.resume, allow_download=args.allow_download,
                              stop_after=args.stop_after)
    print(json.dumps(state.history[-1], indent=2))


def _grid(args):
    try:
        spec = json.loads(Path(args.spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{args.spec}: {exc}") from exc
    rows = ex.run_grid(spec, jobs=args.jobs, summarize_only=args.summarize_only)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} runs, {len(failed)} not ok; summary in {spec.get('output_dir', 'runs/grid')}")


def _eval(args):
    ckpt = Path(args.checkpoint)
    if (ckpt / "checkpoints").is_dir():
        ckpt = ex.latest_checkpoint(ckpt)
    row = ex.evaluate_checkpoint(ckpt)
    (ckpt / "eval.json").write_text(json.dumps(row, indent=2) + "\n")
    print(json.dumps(row, indent=2))


def _plot(args):
    out = Path(args.out)
    if args.kind == "training_curves":
        run = Path(args.inputs[0])
        plotting.training_curves(read_csv(run / "metrics.csv"), read_csv(run / "losses.csv"), out)
    elif args.kind in ("rate_curves", "robustness_bars"):
        rows = []
        for path in args.inputs:
            path = Path(path)
            rows += read_csv(path / "summary.csv" if path.is_dir() else path)
        rows = [r for r in rows if r.get("status", "ok") == "ok"]
        if args.kind == "rate_curves":
            plotting.rate_curves(rows, out)
        else:
            plotting.robustness_bars(rows, out)
    else:
        from .trainer import load_checkpoint
        run = Path(args.inputs[0])
        ckpt = ex.latest_checkpoint(run) if (run / "checkpoints").is_dir() else run
        cfg = ex.load_config(ckpt.parent.parent / "config.json")
        _, data, _ = ex.build_data(cfg)
        state = load_checkpoint(ckpt, data)
        plotting.save_sample_grid(state.G, state.n_classes, data.K, out, seed=cfg.seed)
    print(out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pucnigan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="build a PU split and write its manifest")
    p.add_argument("--dataset", required=True, choices=["synthetic", "mnist", "fashion_mnist", "cifar10"])
    p.add_argument("--positive-rate", type=float, required=True)
    p.add_argument("--dist", default="type1", choices=["type1", "type2", "natural"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--positive-classes", help="JSON list, e.g. '[0,1,2,3,4]' or '[[0,1,8,9]]'")
    p.add_argument("--data-root")
    p.add_argument("--out")
    p.add_argument("--allow-download", action="store_true")
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--n-per-class", type=int, default=2000)
    p.set_defaults(func=_make_data)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--stop-after", type=int, help="stop after this many outer rounds")
    p.add_argument("--allow-download", action="store_true")
    p.set_defaults(func=_run)

    p = sub.add_parser("grid", help="run a grid of configs and summarize")
    p.add_argument("spec")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--summarize-only", action="store_true")
    p.set_defaults(func=_grid)

    p = sub.add_parser("eval", help="recompute metrics from a checkpoint or run directory")
    p.add_argument("checkpoint")
    p.set_defaults(func=_eval)

    p = sub.add_parser("plot", help="render figures from run directories or grid summaries")
    p.add_argument("kind", choices=["rate_curves", "training_curves", "robustness_bars", "sample_grid"])
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError, plotting.MissingColumnError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAborted as exc:
        print(f"training aborted: {exc} (last checkpoint: {exc.checkpoint})", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
