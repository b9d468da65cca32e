"""``bench`` command line: run, grid, fit-fastfood.

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from rfattn.bench.harness import (
    COMPONENTS,
    GRID_COMPONENTS,
    GRID_MATRICES,
    MATRICES,
    RunConfig,
    fit_fastfood_learner,
    run_combination,
    run_grid,
)
from rfattn.bench.report import _write, emit_grid, emit_report
from rfattn.errors import NumericalFailure, ValidationError
from rfattn.weight_matrices import LEARNABLE_S, LEARNABLE_SGB

log = logging.getLogger("rfattn.bench")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _common(p, defaults: RunConfig, with_component=True):
    if with_component:
        p.add_argument("--component", default=defaults.component, help=f"one of {', '.join(COMPONENTS)}")
        p.add_argument("--matrix", default=defaults.matrix, help=f"one of {', '.join(MATRICES)}")
    p.add_argument("--features", type=int, default=defaults.s, help="number of random features s")
    p.add_argument("--dim", type=int, default=defaults.d, help="input dimension d")
    p.add_argument("--dv", type=int, default=defaults.d_v, help="value width")
    p.add_argument("--seq", type=int, default=defaults.N, help="sequence length N")
    p.add_argument("--pairs", type=int, default=defaults.num_pairs, help="kernel evaluation pairs")
    p.add_argument("--rebuilds", type=int, default=defaults.num_rebuilds, help="independent weight draws")
    p.add_argument("--sigma", type=float, default=defaults.sigma)
    p.add_argument("--dk", type=int, default=None, help="key dimension for the softmax temperature (default: dim)")
    p.add_argument("--input-scale", type=float, default=defaults.input_scale)
    p.add_argument("--seed", type=int, default=defaults.seed)


def _config(args, **overrides) -> RunConfig:
    kw = dict(
        component=getattr(args, "component", RunConfig.component),
        matrix=getattr(args, "matrix", RunConfig.matrix),
        s=args.features, d=args.dim, d_v=args.dv, N=args.seq, sigma=args.sigma, d_k=args.dk,
        num_pairs=args.pairs, num_rebuilds=args.rebuilds, seed=args.seed,
        input_scale=args.input_scale, output_path=args.out,
    )
    kw.update(overrides)
    return RunConfig(**kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="score one component x matrix combination")
    _common(run, RunConfig())
    run.add_argument("--out", required=True)
    run.add_argument("--format", choices=("json", "csv"), default="json")

    grid = sub.add_parser("grid", help="run the component x matrix grid")
    _common(grid, RunConfig(), with_component=False)
    grid.add_argument("--components", default=",".join(GRID_COMPONENTS))
    grid.add_argument("--matrices", default=",".join(GRID_MATRICES))
    grid.add_argument("--workers", type=int, default=1)
    grid.add_argument("--out", required=True, help="output directory")

    fit = sub.add_parser("fit-fastfood", help="fit FastFoodL diagonals to a wider RBF kernel")
    _common(fit, RunConfig(component="trigrf", matrix="fastfood_l", s=64, d=8), with_component=False)
    fit.add_argument("--component", default="trigrf")
    fit.add_argument("--target-sigma", type=float, default=2.0)
    fit.add_argument("--steps", type=int, default=200)
    fit.add_argument("--lr", type=float, default=2.0)
    fit.add_argument("--learnable", choices=("S", "SGB"), default="S")
    fit.add_argument("--out", required=True)
    return parser


def _cmd_run(args):
    report = run_combination(_config(args))
    emit_report(report, args.format, args.out)
    log.info("kernel_mse=%.3g attention_mean_rel=%s -> %s", report.kernel_mse, report.attention_mean_rel, args.out)


def _cmd_grid(args):
    components = [c for c in args.components.split(",") if c]
    matrices = [m for m in args.matrices.split(",") if m]
    base = _config(args, component=components[0], matrix=matrices[0])
    grid = run_grid(base, components, matrices, workers=args.workers)
    paths = emit_grid(grid, args.out)
    for cell, msg in grid.failures.items():
        log.warning("cell %s failed: %s", "/".join(cell), msg)
    log.info("%d/%d cells ok -> %s", len(grid.reports), len(grid.cells), paths["summary_csv"])


def _cmd_fit(args):
    cfg = _config(args, component=args.component, matrix="fastfood_l")
    learnable = LEARNABLE_S if args.learnable == "S" else LEARNABLE_SGB
    trace = fit_fastfood_learner(cfg, args.target_sigma, args.steps, args.lr, learnable)
    payload = {"config": cfg.to_dict(), "target_sigma": args.target_sigma, "step_size": args.lr, **trace.to_dict()}
    _write(args.out, json.dumps(payload, indent=2) + "\n")
    log.info("loss %.3g -> %.3g%s", trace.losses[0], trace.losses[-1], " (FAILED)" if trace.failed else "")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = {"run": _cmd_run, "grid": _cmd_grid, "fit-fastfood": _cmd_fit}[args.command]
    try:
        handler(args)
    except ValidationError as exc:
        print(f"bench: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalFailure, ArithmeticError) as exc:
        print(f"bench: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
