"""JSON and CSV writers for benchmark reports."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import fields

from rfattn.bench.harness import COMPONENTS, MATRICES, BenchReport, GridResult, RunConfig

CONFIG_FIELDS = [f.name for f in fields(RunConfig)]
METRIC_FIELDS = [n for n in BenchReport.field_names() if n not in ("config", "build_metadata")]
CSV_HEADER = CONFIG_FIELDS + METRIC_FIELDS + ["build_metadata"]
SUMMARY_HEADER = [
    "component", "matrix", "status", "kernel_mse", "estimator_variance", "attention_mean_rel",
    "rank_kernel_mse", "rank_attention_mean_rel", "error",
]


def _normalize(value):
    # Floats stay floats (0.0, not 0) so the JSON types do not depend on the value.
    if isinstance(value, dict):
        return {k: _normalize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        return value.item()
    return value


def to_json(reports, timing: bool = True) -> str:
    if isinstance(reports, BenchReport):
        payload = _normalize(reports.to_dict(timing))
    else:
        payload = [_normalize(r.to_dict(timing)) for r in reports]
    return json.dumps(payload, indent=2, allow_nan=False) + "\n"


def _csv_row(report: BenchReport) -> list:
    row = [report.config.get(name) for name in CONFIG_FIELDS]
    row += [getattr(report, name) for name in METRIC_FIELDS]
    row.append(json.dumps(_normalize(report.build_metadata), sort_keys=True))
    return ["" if v is None else v for v in row]


def to_csv(reports) -> str:
    if isinstance(reports, BenchReport):
        reports = [reports]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        writer.writerow(_csv_row(r))
    return buf.getvalue()


def _cell_key(component, matrix):
    # Declared vocabulary order, not alphabetical.
    return COMPONENTS.index(component), MATRICES.index(matrix)


def sorted_reports(reports) -> list:
    return sorted(reports, key=lambda r: _cell_key(r.config["component"], r.config["matrix"]))


def summary_csv(grid: GridResult) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, SUMMARY_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in sorted(grid.summary, key=lambda r: _cell_key(r["component"], r["matrix"])):
        writer.writerow({k: "" if v is None else v for k, v in row.items()})
    return buf.getvalue()


def _write(path, text):
    try:
        parent = os.path.dirname(os.fspath(path))
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc


def emit_report(reports, fmt: str, path) -> None:
    """Write one report (JSON object) or a list (JSON array / CSV rows) to ``path``."""
    if fmt == "json":
        _write(path, to_json(reports))
    elif fmt == "csv":
        _write(path, to_csv(reports))
    else:
        raise ValueError(f"format must be json or csv, got {fmt!r}")


def emit_grid(grid: GridResult, out_dir) -> dict:
    """Write ``reports.json``, ``reports.csv`` and ``summary.csv`` into ``out_dir``.

    Rows are sorted stably by (component, matrix) in vocabulary order.
    """
    paths = {
        "reports_json": os.path.join(out_dir, "reports.json"),
        "reports_csv": os.path.join(out_dir, "reports.csv"),
        "summary_csv": os.path.join(out_dir, "summary.csv"),
    }
    reports = sorted_reports(grid.reports)
    emit_report(reports, "json", paths["reports_json"])
    emit_report(reports, "csv", paths["reports_csv"])
    _write(paths["summary_csv"], summary_csv(grid))
    return paths
