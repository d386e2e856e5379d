"""Serialize an EvalReport as JSON plus flat CSV tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .harness import CSV_COLUMNS, EvalReport

SUMMARY_COLUMNS = ("protocol", "dataset", "condition", "k_shot", "lambda", "depth", "switches", "n_seeds",
                   "base_acc_mean", "base_acc_std", "novel_acc_mean", "novel_acc_std", "hm_mean", "hm_std")
TRACE_COLUMNS = ("run", "epoch", "ce", "sr", "cir", "dir", "total")
SALIENCY_COLUMNS = ("step", "sample", "alpha", "masked")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def validate_rows(rows: list[dict]) -> None:
    """Every row must carry exactly the stable columns, with accuracies in [0, 100]."""
    for i, r in enumerate(rows):
        missing = set(CSV_COLUMNS) - set(r)
        if missing:
            raise ValueError(f"row {i} lacks columns {sorted(missing)}")
        for col in ("base_acc", "novel_acc", "hm"):
            v = r[col]
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"row {i}: {col}={v} outside [0, 100]")


def write_report(report: EvalReport, out_dir: str | Path, stem: str | None = None) -> dict[str, Path]:
    """Write <stem>.json, <stem>.csv, <stem>_summary.csv, <stem>_trace.csv (and saliency if recorded)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or report.protocol
    validate_rows(report.rows)
    paths = {"json": out / f"{stem}.json", "csv": out / f"{stem}.csv",
             "summary": out / f"{stem}_summary.csv", "trace": out / f"{stem}_trace.csv"}
    with open(paths["json"], "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_csv(paths["csv"], CSV_COLUMNS, report.rows)
    summary = [{**s, "n_seeds": len(s["seeds"])} for s in report.summary]
    _write_csv(paths["summary"], SUMMARY_COLUMNS, summary)
    trace_rows = [{"run": run, **ep} for run, hist in sorted(report.traces.items()) for ep in hist]
    _write_csv(paths["trace"], TRACE_COLUMNS, trace_rows)
    if report.saliency:
        paths["saliency"] = out / f"{stem}_saliency.csv"
        write_saliency(report.saliency, paths["saliency"])
    return paths


def write_saliency(records, path: str | Path) -> None:
    rows = [{"step": step, "sample": sample,
             "alpha": " ".join(f"{a:.6f}" for a in np.asarray(alpha)),
             "masked": " ".join(str(i) for i in masked)}
            for step, sample, alpha, masked in records]
    _write_csv(Path(path), SALIENCY_COLUMNS, rows)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
