"""Static loss and ablation plots (Agg backend, PNG files only)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_COLUMNS = ("loss_total", "loss_recons", "loss_lcl", "loss_gcl")


def read_metrics(path) -> dict:
    """Columns of a metrics CSV as float lists; empty cells become NaN."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: [float(r[k]) if r[k] != "" else float("nan") for r in rows] for k in rows[0]}


def plot_losses(metrics_csv, out_png) -> Path:
    cols = read_metrics(metrics_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in LOSS_COLUMNS:
        if name in cols and any(v == v for v in cols[name]):
            ax.plot(cols["step"], cols[name], label=name.removeprefix("loss_"), lw=1.6 if name == "loss_total" else 1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if cols:
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def plot_ratio_sweep(summary_csv, out_png) -> Path:
    """Probe metric against corruption ratio, one point per run."""
    with open(summary_csv, newline="") as fh:
        rows = sorted(csv.DictReader(fh), key=lambda r: float(r["ratio"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([100 * float(r["ratio"]) for r in rows], [100 * float(r["value"]) for r in rows], "o-")
    ax.set_xlabel("masking ratio (%)")
    ax.set_ylabel(f"{rows[0]['metric'] if rows else 'metric'} (%)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def emit_plots(metrics_csv=None, out_dir=".", sweep_csv=None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []
    if metrics_csv:
        made.append(plot_losses(metrics_csv, out_dir / "loss_vs_step.png"))
    if sweep_csv:
        made.append(plot_ratio_sweep(sweep_csv, out_dir / "metric_vs_ratio.png"))
    return made
