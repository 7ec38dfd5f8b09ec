"""Figures rendered next to the delimited reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(losses, lrs, path):
    """Loss per iteration with the learning-rate schedule on a twin axis."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(losses, color="tab:blue", lw=1.2, label="loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax2 = ax.twinx()
    ax2.plot(lrs, color="tab:orange", lw=1.0, ls="--", label="lr")
    ax2.set_ylabel("learning rate")
    ax.set_title("training")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_accounting_chart(rows, path):
    """Log-scale bars of communication per strategy (all vs image bytes)."""
    modes = [r.mode for r in rows]
    x = np.arange(len(modes))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, [max(r.comm_all, 1) for r in rows], width=0.4, label="comm all")
    ax.bar(x + 0.2, [max(r.comm_image, 1) for r in rows], width=0.4, label="comm image")
    ax.set_yscale("log")
    ax.set_xticks(x, modes)
    ax.set_ylabel("bytes per batch (log)")
    ax.set_title("communication by storage strategy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_chart(labels, report_rows, path):
    """Grouped bars of AUC/GAUC per evaluated checkpoint."""
    x = np.arange(len(labels))
    aucs = [r["auc"] for r in report_rows]
    gaucs = [r["gauc"] for r in report_rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, aucs, width=0.4, label="auc")
    ax.bar(x + 0.2, gaucs, width=0.4, label="gauc")
    lo = min(min(aucs), min(gaucs))
    hi = max(max(aucs), max(gaucs))
    pad = max(0.01, (hi - lo) * 0.5)
    ax.set_ylim(max(0.0, lo - pad), min(1.0, hi + pad))
    ax.set_xticks(x, labels, rotation=20, ha="right")
    ax.set_ylabel("metric")
    ax.set_title("evaluation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
