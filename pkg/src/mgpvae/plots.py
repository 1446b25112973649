"""Figure rendering for training logs, evaluation reports, and imputations.

Everything writes PNG files next to the delimited outputs; the Agg backend
is forced so the CLI works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

TERM_LABELS = {
    "total": "total loss",
    "recon": "reconstruction",
    "gp": "prior (neg. log-density)",
    "reg": "posterior entropy term",
    "noise": "noise-scale term",
}


def save_loss_curves(records, path) -> Path:
    """Per-term loss trajectories with stage boundaries marked."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(9, 5))
    xs = np.arange(len(records))
    for key in ("total", "recon", "gp", "reg", "noise"):
        ax.plot(xs, [getattr(r, key) for r in records], label=TERM_LABELS[key], linewidth=1.2)
    stages = [r.stage for r in records]
    for i in range(1, len(stages)):
        if stages[i] != stages[i - 1]:
            ax.axvline(i - 0.5, color="gray", linestyle=":", linewidth=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss terms")
    ax.set_title("staged training trajectory")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_report_figures(table, out_dir) -> list:
    """Grouped bar charts (PSNR and MSE) per (modality, presence) group."""
    out_dir = Path(out_dir)
    paths = []
    if not table.groups:
        return paths
    labels = [f"m{g.modality}/{g.n_present}p" for g in table.groups]
    x = np.arange(len(labels))
    width = 0.8 / max(len(table.methods), 1)
    for metric, fname, ylabel, log in (
        ("mean_psnr", "report_psnr.png", "mean PSNR (dB)", False),
        ("mean_mse", "report_mse.png", "mean MSE", True),
    ):
        fig, ax = plt.subplots(figsize=(max(6, len(labels) * 0.9), 4.5))
        for i, method in enumerate(table.methods):
            vals = [
                getattr(g.by_method[method], metric) if method in g.by_method else np.nan
                for g in table.groups
            ]
            ax.bar(x + (i - (len(table.methods) - 1) / 2) * width, vals, width, label=method)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
        ax.set_ylabel(ylabel)
        ax.set_xlabel("modality / present views of the patient")
        if log:
            ax.set_yscale("log")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3, axis="y")
        fig.tight_layout()
        target = out_dir / fname
        fig.savefig(target, dpi=120)
        plt.close(fig)
        paths.append(target)
    return paths


def save_imputation_montage(items, path) -> Path:
    """Mid-slice comparison per target: ground truth vs each method.

    ``items`` is a list of (label, {column_name: volume}) with consistent
    column names across rows.
    """
    path = Path(path)
    columns = list(items[0][1].keys())
    n_rows, n_cols = len(items), len(columns)
    fig, axes = plt.subplots(
        n_rows, n_cols, figsize=(2.1 * n_cols, 2.1 * n_rows), squeeze=False
    )
    for r, (label, vols) in enumerate(items):
        vmin = min(float(np.min(v)) for v in vols.values())
        vmax = max(float(np.max(v)) for v in vols.values())
        for c, name in enumerate(columns):
            ax = axes[r][c]
            vol = vols[name]
            ax.imshow(vol[vol.shape[0] // 2], cmap="gray", vmin=vmin, vmax=vmax)
            ax.set_xticks(())
            ax.set_yticks(())
            if r == 0:
                ax.set_title(name, fontsize=9)
            if c == 0:
                ax.set_ylabel(label, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
