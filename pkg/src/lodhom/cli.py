"""Command-line driver for the homogenization experiments.

Subcommands: convergence, resonance, periodic-check, single-run, export-plot.
Flags override config-file values.  Exit codes: 0 success, 2 configuration
error, 3 numerical failure.
"""

import argparse
import sys

from .experiments import (
    ConfigError,
    export_plot_files,
    parse_config,
    run_experiment,
)
from .fem import SolverError
from .geometry import MeshStructureError

_SUBCOMMANDS = {
    "convergence": "convergence",
    "resonance": "resonance",
    "periodic-check": "periodic_check",
    "single-run": "single_run",
}


def _add_common_flags(p):
    p.add_argument("--config", metavar="PATH", help="JSON config file")
    p.add_argument("--ell", type=int, metavar="N", help="oversampling order")
    p.add_argument("--fine-levels", type=int, metavar="N",
                   help="refinement levels of the reference mesh over the finest coarse mesh")
    p.add_argument("--coeff", metavar="NAME", help="builtin coefficient name")
    p.add_argument("--eps", type=float, metavar="FLOAT", help="oscillation length")
    p.add_argument("--eps1", type=float, metavar="FLOAT", help="first oscillation length")
    p.add_argument("--eps2", type=float, metavar="FLOAT", help="second oscillation length")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--threads", type=int, metavar="N", help="worker threads")
    p.add_argument("--tol", type=float, metavar="FLOAT",
                   help="relative tolerance of the worst-case error iteration")


def _overrides_from_args(args):
    over = {}
    coeff = {}
    if args.coeff is not None:
        coeff["name"] = args.coeff
    if args.eps is not None:
        coeff["eps"] = args.eps
    if args.eps1 is not None:
        coeff["eps1"] = args.eps1
    if args.eps2 is not None:
        coeff["eps2"] = args.eps2
    if coeff:
        over["coefficient"] = coeff
    if args.ell is not None:
        over["ell"] = args.ell
    if args.fine_levels is not None:
        over["fine_levels"] = args.fine_levels
    if args.out is not None:
        over["out_dir"] = args.out
    if args.threads is not None:
        over["threads"] = args.threads
    if args.tol is not None:
        over["tol"] = args.tol
    return over


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lodhom",
        description="Quasi-local effective diffusion tensors on the unit square")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name.replace('-', ' ')} experiment")
        _add_common_flags(p)
    pp = sub.add_parser("export-plot", help="emit gnuplot-ready .dat files from CSVs")
    pp.add_argument("--out", metavar="DIR", required=True,
                    help="directory holding experiment CSV files")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "export-plot":
            for path in export_plot_files(args.out):
                print(path)
            return 0
        cfg = parse_config(path=args.config,
                           overrides=_overrides_from_args(args),
                           experiment=_SUBCOMMANDS[args.command])
        paths = run_experiment(cfg)
        for key in sorted(paths):
            print(f"{key}: {paths[key]}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, MeshStructureError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
