"""Accuracy-curve tables and static figures for finished runs."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import EmitError  # noqa: E402
from .evaluator import MetricsLedger  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.5,
    "lines.markersize": 4,
    "svg.hashsalt": "prol",
}


def figsize(scale: float = 1.0) -> tuple[float, float]:
    width = 5.0 * scale
    return width, width * (math.sqrt(5.0) - 1.0) / 2.0


def _check(name: str, ledgers: Sequence[MetricsLedger]) -> None:
    if not ledgers:
        raise EmitError(f"{name}: no ledgers to report")
    for k, led in enumerate(ledgers):
        if led.completed != led.T:
            raise EmitError(f"{name}: ledger {k} is missing task column {led.completed + 1} of {led.T}")


def curves(ledgers: Sequence[MetricsLedger]) -> tuple[np.ndarray, np.ndarray]:
    """Stacked AA_t and forgetting-at-t curves, one row per ledger."""
    aa = np.array([led.aa_curve() for led in ledgers])
    fm = np.array([[led.forgetting_at(t) for t in range(1, led.T + 1)] for led in ledgers])
    return aa, fm


def emit_tables(results: Mapping[str, Sequence[MetricsLedger]], outdir, labels=None) -> Path:
    """``accuracy_curve.csv``: one row per ledger plus mean/std rows per group.

    Columns follow the per-task layout: the average accuracy after each task,
    then AVG (the mean of that row).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "accuracy_curve.csv"
    T = None
    rows = []
    for name, ledgers in results.items():
        _check(name, ledgers)
        aa, _ = curves(ledgers)
        if T is None:
            T = aa.shape[1]
        elif aa.shape[1] != T:
            raise EmitError(f"{name}: task count {aa.shape[1]} differs from {T}")
        tags = labels[name] if labels else [str(k) for k in range(len(ledgers))]
        for tag, row in zip(tags, aa):
            rows.append([name, tag, *row, row.mean()])
        if len(ledgers) > 1:
            rows.append([name, "mean", *aa.mean(0), aa.mean(1).mean()])
            rows.append([name, "std", *aa.std(0), aa.mean(1).std()])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "seed", *(f"task{t}" for t in range(1, T + 1)), "AVG"])
        for r in rows:
            w.writerow([r[0], r[1], *(f"{v:.2f}" for v in r[2:])])
    return path


def _band(ax, x, values, label):
    mean = values.mean(0)
    line, = ax.plot(x, mean, marker="o", label=label)
    if len(values) > 1:
        sd = values.std(0)
        ax.fill_between(x, mean - sd, mean + sd, alpha=0.2, color=line.get_color(), linewidth=0)


def emit_plots(results: Mapping[str, Sequence[MetricsLedger]], outdir, formats=("svg", "png")) -> list[Path]:
    """Line plots of AA_t and forgetting vs task; a shaded band marks +-1 std across ledgers."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(STYLE):
        for key, ylabel, pick in (("accuracy", "average accuracy AA$_t$ (%)", 0),
                                  ("forgetting", "forgetting after task $t$ (%)", 1)):
            fig, ax = plt.subplots(figsize=figsize())
            for name, ledgers in results.items():
                _check(name, ledgers)
                values = curves(ledgers)[pick]
                x = np.arange(1, values.shape[1] + 1)
                _band(ax, x, values, name)
            ax.set_xlabel("task $t$")
            ax.set_ylabel(ylabel)
            ax.xaxis.get_major_locator().set_params(integer=True)
            if len(results) > 1:
                ax.legend(frameon=False)
            fig.tight_layout()
            for fmt in formats:
                path = outdir / f"{key}.{fmt}"
                fig.savefig(path, metadata={"Date": None} if fmt == "svg" else None)
                written.append(path)
            plt.close(fig)
    return written
