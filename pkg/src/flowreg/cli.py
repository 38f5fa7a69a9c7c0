"""Command-line entry point.

Kept import-light on purpose: --threads must cap the BLAS thread pools
through environment variables before numpy is first imported, so the
compute modules are only pulled in after argument parsing.
"""

from __future__ import annotations

import argparse
import os
import sys


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="run configuration file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS thread count")
    common.add_argument("--out", default=None, help="output directory (or report path for evaluate)")

    parser = argparse.ArgumentParser(
        prog="flowreg",
        description="Diffeomorphic 3D registration with a coordinate-MLP velocity field.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", parents=[common],
                       help="register a moving volume onto a fixed volume")
    p.add_argument("moving", help="moving image (.frg scalar volume)")
    p.add_argument("fixed", help="fixed image (.frg scalar volume)")

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a displacement field against label masks")
    p.add_argument("field", help="displacement field (.frg vector field)")
    p.add_argument("moving_mask", help="moving label mask (.frg)")
    p.add_argument("fixed_mask", help="fixed label mask (.frg)")
    p.add_argument("--gt-field", default=None, help="ground-truth field for endpoint error")

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic phantom pair with ground truth")
    p.add_argument("spec", nargs="?", default=None, help="phantom + bump spec file")

    p = sub.add_parser("snapshots", parents=[common],
                       help="write the intermediate warps of a trained network")
    p.add_argument("moving", help="moving image (.frg scalar volume)")
    p.add_argument("params", help="network checkpoint (.frgp)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1")
            return 1
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from . import cli_io

    if args.command == "register":
        return cli_io.cmd_register(args.moving, args.fixed, config_path=args.config,
                                   out_dir=args.out or "out", seed=args.seed)
    if args.command == "evaluate":
        return cli_io.cmd_evaluate(args.field, args.moving_mask, args.fixed_mask,
                                   gt_field_path=args.gt_field,
                                   out_path=args.out or "report.tsv")
    if args.command == "synth":
        return cli_io.cmd_synth(args.spec, out_dir=args.out or "synth")
    if args.command == "snapshots":
        return cli_io.cmd_snapshots(args.moving, args.params, config_path=args.config,
                                    out_dir=args.out or "snapshots")
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
