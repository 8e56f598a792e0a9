"""Command-line interface.

    xmct --config exp.ini [--seed N] [--out DIR] [--workers N] <command>

Commands: generate-data, train-prior, train-xmodal, reconstruct, evaluate,
report. Exit codes: 0 success, 1 user/config error, 2 runtime failure.
"""

import argparse
import sys

from .config import parse_config
from .errors import ConfigError, XmctError
from . import harness

COMMANDS = ("generate-data", "train-prior", "train-xmodal",
            "reconstruct", "evaluate", "report")


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="experiment config file (INI)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="override the output directory")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                        help="parallel sweep workers (default 1)")

    parser = argparse.ArgumentParser(prog="xmct", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument("--workers", type=int, default=None)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("train-prior", "train-xmodal"):
            sp.add_argument("--resume", default=None,
                            help="checkpoint to continue from")
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 1
    if args.config is None:
        print("error: --config is required", file=sys.stderr)
        return 1
    try:
        cfg = parse_config(args.config, seed_override=args.seed,
                           out_override=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    workers = args.workers or 1
    try:
        if args.command == "generate-data":
            path = harness.cmd_generate_data(cfg)
            print(f"dataset written to {path}")
        elif args.command == "train-prior":
            ckpt, result = harness.cmd_train_prior(cfg, resume=args.resume)
            last = result.epoch_losses[-1] if result.epoch_losses else float("nan")
            print(f"prior checkpoint {ckpt} ({result.steps} steps, "
                  f"last epoch loss {last:.5f})")
        elif args.command == "train-xmodal":
            ckpt, result, gate = harness.cmd_train_xmodal(cfg, resume=args.resume)
            print(f"translator checkpoint {ckpt} ({result.steps} steps); "
                  f"validation: {gate['frac_improved']:.0%} pairs improved, "
                  f"PSNR {gate['mean_psnr_before']:.2f} -> "
                  f"{gate['mean_psnr_after']:.2f} dB")
        elif args.command == "reconstruct":
            statuses, failed = harness.cmd_reconstruct(cfg, workers=workers)
            print(f"{len(statuses) - len(failed)}/{len(statuses)} cells ok")
            for key, st in sorted(failed.items()):
                print(f"  failed {key}: {st['error']}", file=sys.stderr)
        elif args.command == "evaluate":
            reports = harness.cmd_evaluate(cfg)
            print(f"evaluated {len(reports)} reconstructions -> "
                  f"{cfg.out_dir}/results/metrics.csv")
        elif args.command == "report":
            path = harness.cmd_report(cfg)
            print(f"report written to {path}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except XmctError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
