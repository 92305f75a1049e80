"""Report figures rendered to PNG files next to the CSV output."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import BiomarkerResult, GridSearchResult
from .metrics import MetricRow

_SAVE_KW = {"dpi": 110, "metadata": {"Software": "hemiseg"}}


def training_curves(histories: list[list[dict]], path: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for k, history in enumerate(histories):
        epochs = [row["epoch"] for row in history]
        ax.plot(epochs, [row["train_loss"] for row in history],
                label=f"member {k} train")
        if not np.isnan(history[0]["val_loss"]):
            ax.plot(epochs, [row["val_loss"] for row in history],
                    linestyle="--", label=f"member {k} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("Training curves")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def metric_boxplots(rows: list[tuple[str, MetricRow]], path: str) -> None:
    regions = sorted({row.region for _, row in rows})
    metrics = [("dice", "Dice"), ("hd_mm", "HD (mm)"),
               ("precision", "Precision"), ("recall", "Recall")]
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 4))
    for ax, (attr, label) in zip(axes, metrics):
        data = [[getattr(row, attr) for _, row in rows if row.region == region]
                for region in regions]
        ax.boxplot(data)
        ax.set_xticks(range(1, len(regions) + 1))
        ax.set_xticklabels([r.replace("_", "\n") for r in regions])
        ax.set_title(label, fontsize=10)
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def midline_curve(rows: list[tuple[int, float, float]], path: str) -> None:
    ns = [n for n, _, _ in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ns, [d for _, d, _ in rows], marker="o", label="ipsilateral")
    ax.plot(ns, [d for _, _, d in rows], marker="s", label="contralateral")
    ax.set_xlabel("dilation iterations n")
    ax.set_ylabel("Dice in midline band")
    ax.set_title("Midline-band Dice")
    ax.set_xticks(ns)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def ratio_scatter(result: BiomarkerResult, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(result.gt_ratios, result.pred_ratios, color="tab:blue")
    lo = min(result.gt_ratios + result.pred_ratios)
    hi = max(result.gt_ratios + result.pred_ratios)
    pad = 0.05 * (hi - lo) if hi > lo else 0.05
    line = (lo - pad, hi + pad)
    ax.plot(line, line, color="gray", linewidth=0.8)
    ax.set_xlabel("reference hemispheric ratio")
    ax.set_ylabel("predicted hemispheric ratio")
    ax.set_title(f"d = {result.cohens_d:.3f} "
                 f"[{result.ci_low:.3f}, {result.ci_high:.3f}]")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def gridsearch_heatmap(result: GridSearchResult, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 8))
    im = ax.imshow(result.scores, aspect="auto", origin="lower",
                   extent=(result.alpha_grid[0] - 0.5, result.alpha_grid[-1] + 0.5,
                           result.percentile_grid[0] - 0.5,
                           result.percentile_grid[-1] + 0.5))
    ax.plot(result.best_alpha, result.best_percentile_index, "r*", markersize=12)
    ax.set_xlabel("closing iterations alpha")
    ax.set_ylabel("percentile index i")
    ax.set_title(f"best: i={result.best_percentile_index}, "
                 f"alpha={result.best_alpha}, "
                 f"Dice={result.best_mean_dice:.4f}")
    fig.colorbar(im, ax=ax, label="mean Dice")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
