"""Delimited tables and matplotlib figures for benchmark and training runs."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be set first

GAP = "--"


def write_rows(path, header, rows) -> str:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    return path


def read_rows(path) -> tuple:
    """Returns (header, rows) where each row is a dict keyed by header."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
        return tuple(reader.fieldnames or ()), rows


def read_curve(path, x_field="step"):
    """Loss-curve CSV to (xs, {column: values}) with floats."""
    header, rows = read_rows(path)
    xs = [float(r[x_field]) for r in rows]
    series = {}
    for col in header:
        if col == x_field:
            continue
        series[col] = [float(r[col]) for r in rows]
    return xs, series


def plot_loss_curves(csv_path, out_path, *, title=None) -> str:
    xs, series = read_curve(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in series.items():
        ax.plot(xs, ys, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_series(curves: dict, out_path, *, ylabel="value", title=None) -> str:
    """curves maps a label to (xs, ys)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (xs, ys) in curves.items():
        ax.plot(xs, ys, marker="o", markersize=3, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_metric_bars(table, out_path, *, title=None) -> str:
    """Grouped bar chart of a MetricsTable; absent cells are simply skipped."""
    import numpy as np

    metrics = list(table.metrics)
    variants = list(table.variants)
    x = np.arange(len(metrics), dtype=float)
    width = 0.8 / max(1, len(variants))
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for i, variant in enumerate(variants):
        xs, means, stds = [], [], []
        for j, metric in enumerate(metrics):
            cell = table.get(variant, metric)
            if cell is None:
                continue
            xs.append(x[j] + (i - (len(variants) - 1) / 2) * width)
            means.append(cell[0])
            stds.append(cell[1])
        if xs:
            ax.bar(xs, means, width=width, yerr=stds, capsize=3, label=variant)
    ax.set_xticks(x)
    ax.set_xticklabels(metrics)
    ax.set_ylabel("score")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
