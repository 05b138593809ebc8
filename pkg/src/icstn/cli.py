"""``icstn`` command line: train, eval, report, figures, prepare-mnist."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .exceptions import ConfigurationError, DataFormatError


def _add_train(sub):
    p = sub.add_parser("train", help="train one model and write metrics.csv, config.json and model.bin")
    p.add_argument("--experiment", choices=["planar", "mnist"], default="planar")
    p.add_argument("--arch", required=True, help='architecture string, e.g. "[FC(8)]x4 -> conv(9x9,3)-FC(10)"')
    p.add_argument("--variant", choices=["cnn", "stn", "cstn", "icstn"])
    p.add_argument("--family", choices=["translation", "affine", "homography"])
    p.add_argument("--sigma", type=float, help="corner noise (pixels)")
    p.add_argument("--sigma-t", type=float, help="shared translation noise (pixels); defaults to --sigma")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--lr-class", type=float)
    p.add_argument("--lr-geo", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--full", action="store_true", help="200K iterations instead of the 20K desk default")
    p.add_argument("--eval-every", type=int, default=1000)
    p.add_argument("--data", help="MNIST directory (default $ICSTN_DATA)")
    p.add_argument("--planar-config", help="planar .cfg file (default: bundled image)")


def _train(args):
    from .experiments import DESK_ITERATIONS, ExperimentConfig, run

    config = ExperimentConfig(
        experiment=args.experiment,
        arch=args.arch,
        variant=args.variant,
        family=args.family,
        sigma=args.sigma,
        sigma_t=args.sigma_t,
        iterations=args.iters or DESK_ITERATIONS,
        batch=args.batch,
        lr_class=args.lr_class,
        lr_geo=args.lr_geo,
        seed=args.seed,
        out_dir=args.out,
        eval_every=args.eval_every,
        data_root=args.data,
        planar_config=args.planar_config,
        full=args.full,
    )
    result = run(config, log=lambda msg: print(msg, flush=True))
    print(json.dumps({"model": config.name, **result.metrics.final}))


def _eval(args):
    from .experiments import evaluate_checkpoint

    print(json.dumps(evaluate_checkpoint(args.checkpoint, args.warp_ops, args.data)))


def _report(args):
    from .experiments import report

    print(report(args.files, args.csv))


def _figures(args):
    from .experiments import export_figures

    for path in export_figures(args.checkpoint, args.out, args.data):
        print(path)


def _prepare_mnist(args):
    from .data import write_mnist_subset_from_mlxtend

    print(write_mnist_subset_from_mlxtend(args.out))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icstn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint, optionally with a different warp count")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--warp-ops", type=int, help="number of warp applications (IC-STN may exceed training depth)")
    p.add_argument("--data")

    p = sub.add_parser("report", help="merge finished runs into one table")
    p.add_argument("files", nargs="+", help="metrics.csv files (config.json must sit next to each)")
    p.add_argument("--csv", help="also write the table as CSV")

    p = sub.add_parser("figures", help="alignment strips, class mean/variance and boundary-effect panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data")

    p = sub.add_parser("prepare-mnist", help="write the mlxtend MNIST sample as IDX files")
    p.add_argument("--out", default="data")
    return parser


COMMANDS = {"train": _train, "eval": _eval, "report": _report, "figures": _figures, "prepare-mnist": _prepare_mnist}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (ConfigurationError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
