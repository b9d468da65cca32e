"""Benchmark harness for random-feature attention."""

from rfattn.bench.harness import (
    BenchReport,
    FitTrace,
    GridResult,
    RunConfig,
    fit_fastfood_learner,
    run_combination,
    run_grid,
)
from rfattn.bench.report import emit_grid, emit_report

__all__ = [
    "BenchReport",
    "FitTrace",
    "GridResult",
    "RunConfig",
    "emit_grid",
    "emit_report",
    "fit_fastfood_learner",
    "run_combination",
    "run_grid",
]
