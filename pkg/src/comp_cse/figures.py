"""Matplotlib renderings of the CSV artifacts written by ``evaluate``/``train``.

Figures are built with the object API (no pyplot state) and saved as PNG
without version metadata so identical inputs give identical bytes.
"""
from __future__ import annotations

import numpy as np
import pandas as pd
from matplotlib.figure import Figure

PNG_META = {"Software": None}


def _read(path):
    return pd.read_csv(path, comment="#")


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=PNG_META)


def render_learning_curves(curves, path):
    """Validation MAE per epoch; ``curves`` maps a legend label to a metrics CSV."""
    fig = Figure(figsize=(6.0, 4.0))
    ax = fig.add_subplot()
    for label, csv in curves.items():
        m = _read(csv)
        ax.plot(m["epoch"], m["val_mae"], label=label, lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation MAE (bit/s/Hz)")
    ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def render_scatter(scatter_csv, path, gridsize=60):
    """Density of (true, predicted) CSE with the perfect-agreement diagonal."""
    s = _read(scatter_csv)
    x, y = s["true_cse"].to_numpy(), s["pred_cse"].to_numpy()
    lo = float(min(x.min(), y.min()))
    hi = float(max(x.max(), y.max()))
    fig = Figure(figsize=(5.5, 4.8))
    ax = fig.add_subplot()
    hb = ax.hexbin(x, y, gridsize=gridsize, cmap="viridis", mincnt=1, extent=(lo, hi, lo, hi))
    fig.colorbar(hb, ax=ax, label="samples")
    ax.plot([lo, hi], [lo, hi], "r--", lw=1)
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    ax.set_xlabel("true CSE (bit/s/Hz)")
    ax.set_ylabel("predicted CSE (bit/s/Hz)")
    fig.tight_layout()
    _save(fig, path)


def render_case_bars(histogram_csv, path):
    """Grouped bars of mean SE, true CSE and predicted CSE for each case."""
    h = _read(histogram_csv)
    cols = [("se_avg", "SE (ST)"), ("true_cse_avg", "true CSE (JT)"), ("pred_cse_avg", "predicted CSE")]
    pos = np.arange(len(h))
    width = 0.8 / len(cols)
    fig = Figure(figsize=(6.5, 4.0))
    ax = fig.add_subplot()
    for k, (col, label) in enumerate(cols):
        ax.bar(pos + (k - 1) * width, h[col], width, label=label)
    ax.set_xticks(pos)
    ax.set_xticklabels(h["case"].astype(str))
    ax.set_ylabel("bit/s/Hz")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
