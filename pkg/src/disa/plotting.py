"""Figures for the report path: ablation bars, sweep curves, few-shot curves, loss traces.

Everything renders off-screen with the Agg backend and is written to files
next to the CSV/JSON output.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

STYLE = {
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "font.family": "serif",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "disa",
}

# stable save metadata so identical inputs give identical files
_META = {"png": {"Software": None}, "svg": {"Date": None, "Creator": None}, "pdf": {"CreationDate": None}}


def figure(width: float = 5.0, height: float | None = None):
    """A styled figure/axes pair with a golden-ratio default height."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height or width * GOLDEN), facecolor="w")
    return fig, ax


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, metadata=_META.get(path.suffix.lstrip("."), None))
    plt.close(fig)
    return path


def _summary_by_condition(summary: list[dict], dataset: str | None = None) -> list[dict]:
    return [s for s in summary if dataset is None or s["dataset"] == dataset]


def plot_accuracy_bars(summary: list[dict], path: str | Path, title: str = ""):
    """Grouped base/novel/HM bars, one group per condition, error bars are seed std."""
    rows = [s for s in summary if "hm_mean" in s]
    if not rows:
        rows = _summary_by_condition(summary)
        keys = (("base_acc", "accuracy"),)
    else:
        keys = (("base_acc", "base"), ("novel_acc", "novel"), ("hm", "HM"))
    fig, ax = figure(max(5.0, 0.9 * len(rows) + 2))
    width = 0.8 / len(keys)
    labels = [s["condition"] if s["dataset"] in ("corpus-A",) else f"{s['condition']}\n{s['dataset']}"
              for s in rows]
    for j, (col, name) in enumerate(keys):
        xs = [i + (j - (len(keys) - 1) / 2) * width for i in range(len(rows))]
        ax.bar(xs, [s.get(f"{col}_mean", 0.0) for s in rows], width,
               yerr=[s.get(f"{col}_std", 0.0) for s in rows], capsize=2, label=name)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False, ncol=len(keys))
    if title:
        ax.set_title(title)
    return save(fig, path)


def plot_sweep(summary: list[dict], path: str | Path, x_key: str, xlabel: str):
    """Base/novel/HM against a swept hyperparameter."""
    rows = sorted((s for s in summary if "hm_mean" in s), key=lambda s: s[x_key])
    xs = [s[x_key] for s in rows]
    fig, ax = figure()
    for col, name, marker in (("base_acc", "base", "o"), ("novel_acc", "novel", "s"), ("hm", "HM", "^")):
        ax.errorbar(xs, [s[f"{col}_mean"] for s in rows], yerr=[s[f"{col}_std"] for s in rows],
                    marker=marker, capsize=2, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy (%)")
    ax.legend(frameon=False)
    return save(fig, path)


def plot_few_shot(summary: list[dict], path: str | Path):
    rows = sorted((s for s in summary if s["dataset"] == "corpus-A"), key=lambda s: s["k_shot"])
    fig, ax = figure()
    ax.errorbar([s["k_shot"] for s in rows], [s["base_acc_mean"] for s in rows],
                yerr=[s["base_acc_std"] for s in rows], marker="o", capsize=2)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("shots per class")
    ax.set_ylabel("accuracy (%)")
    return save(fig, path)


def plot_loss_traces(traces: dict[str, list[dict]], path: str | Path, max_runs: int = 8):
    """Per-epoch loss components for the first few runs, one panel per component."""
    comps = ("ce", "sr", "cir", "dir", "total")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(comps), figsize=(2.2 * len(comps), 2.4), facecolor="w")
    for run in sorted(traces)[:max_runs]:
        hist = traces[run]
        for ax, c in zip(axes, comps):
            ax.plot([h["epoch"] for h in hist], [h[c] for h in hist], lw=1, label=run)
    for ax, c in zip(axes, comps):
        ax.set_title(c)
        ax.set_xlabel("epoch")
    axes[-1].legend(frameon=False, fontsize=6)
    return save(fig, path)


def render_report_figures(report, out_dir: str | Path, stem: str | None = None) -> list[Path]:
    """Pick the figures that make sense for the report's protocol."""
    out = Path(out_dir)
    stem = stem or report.protocol
    paths = []
    if report.protocol == "lambda-sweep":
        paths.append(plot_sweep(report.summary, out / f"{stem}.png", "lambda", "direction weight λ"))
    elif report.protocol == "depth-sweep":
        paths.append(plot_sweep(report.summary, out / f"{stem}.png", "depth", "prompt depth (layers)"))
    elif report.protocol == "few-shot":
        paths.append(plot_few_shot(report.summary, out / f"{stem}.png"))
    else:
        paths.append(plot_accuracy_bars(report.summary, out / f"{stem}.png", report.protocol))
    if report.traces:
        paths.append(plot_loss_traces(report.traces, out / f"{stem}_losses.png"))
    return paths
