"""Matplotlib renderings of run artifacts: metric curves, per-layer channel
histograms and per-layer cost breakdowns, written next to the CSV outputs.

matplotlib is imported lazily so cost-only CLI paths stay fast.
"""

from __future__ import annotations

import csv
import json
import os

__all__ = ["render_run_figures", "render_metrics_figure", "render_channels_figure",
           "render_report_figure"]

_STAGE_COLORS = {"pretrain": "tab:blue", "search": "tab:red", "finetune": "tab:green"}


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_metrics_figure(metrics_csv, out_png):
    plt = _plt()
    rows = []
    with open(metrics_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    if not rows:
        return
    xs = range(1, len(rows) + 1)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(xs, [float(r["task_loss"]) for r in rows], label="task loss", color="black")
    ax1.plot(xs, [float(r["total"]) for r in rows], label="total objective",
             color="tab:orange", linestyle="--")
    ax1.set_ylabel("loss")
    ax1.legend(loc="upper right", fontsize=8)
    ax2.plot(xs, [float(r["resource"]) for r in rows], label="discrete resource",
             color="tab:red")
    ax2.set_ylabel("resource")
    ax2.set_xlabel("epoch (all stages)")
    ax3 = ax2.twinx()
    ax3.plot(xs, [float(r["accuracy"]) for r in rows], label="test accuracy",
             color="tab:green")
    ax3.set_ylabel("accuracy")
    ax3.set_ylim(0, 1.02)
    # shade stage spans
    start = 0
    for i in range(1, len(rows) + 1):
        if i == len(rows) or rows[i]["stage"] != rows[start]["stage"]:
            for ax in (ax1, ax2):
                ax.axvspan(start + 0.5, i + 0.5, alpha=0.08,
                           color=_STAGE_COLORS.get(rows[start]["stage"], "gray"))
            start = i
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def render_channels_figure(arch_json, out_png):
    plt = _plt()
    with open(arch_json, encoding="utf-8") as fh:
        doc = json.load(fh)
    layers = [b for b in doc["blocks"] if b["type"] == "searchable"]
    if not layers:
        return
    idx = [b["index"] for b in layers]
    dense = [b["out_channels"] for b in layers]
    kept = [len(b["retained"]) for b in layers]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(idx, dense, color="lightgray", label="dense channels")
    ax.bar(idx, kept, color="tab:red", label="retained channels")
    ax.set_xlabel("layer")
    ax.set_ylabel("channels")
    ax.set_xticks(idx)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def render_report_figure(rows, out_png):
    """Per-layer FLOPs bar chart from resource_report rows."""
    plt = _plt()
    totals = {}
    for row in rows:
        totals[row["layer"]] = totals.get(row["layer"], 0) + row["flops"]
    if not totals:
        return
    idx = sorted(totals)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(idx, [totals[i] for i in idx], color="tab:blue")
    ax.set_xlabel("layer")
    ax.set_ylabel("FLOPs")
    ax.set_xticks(idx)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def render_run_figures(out_dir):
    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    metrics = os.path.join(out_dir, "metrics.csv")
    if os.path.exists(metrics):
        render_metrics_figure(metrics, os.path.join(fig_dir, "metrics.png"))
    arch = os.path.join(out_dir, "architecture.json")
    if os.path.exists(arch):
        render_channels_figure(arch, os.path.join(fig_dir, "channels.png"))
