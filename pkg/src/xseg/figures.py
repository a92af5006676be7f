"""Report figures rendered to files next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .metrics import EvalReport
from .training import AblationRow, RunLog


def save_training_curves(log: RunLog, path) -> Path:
    path = Path(path)
    epochs = [e.epoch for e in log.epochs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [e.train_loss for e in log.epochs], label="train loss")
    ax1.plot(epochs, [e.val_loss for e in log.epochs], label="val loss")
    if log.best_epoch >= 0:
        ax1.axvline(log.best_epoch, color="gray", linestyle=":", label="best epoch")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("combined loss")
    ax1.legend(frameon=False)
    ax2.plot(epochs, [e.val_dice for e in log.epochs], color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val dice")
    ax2.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_region_summary(report: EvalReport, path) -> Path:
    path = Path(path)
    regions = [r for r in EvalReport.SUMMARY_REGIONS if r in report.summaries]
    dice = [report.summaries[r].mean_dice for r in regions]
    iou = [report.summaries[r].mean_iou for r in regions]
    hd = [report.summaries[r].hd95_nanmean for r in regions]
    x = np.arange(len(regions))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(x - 0.18, dice, width=0.36, label="dice")
    ax1.bar(x + 0.18, iou, width=0.36, label="iou")
    ax1.set_xticks(x, regions, rotation=20)
    ax1.set_ylim(0, 1.05)
    ax1.legend(frameon=False)
    ax2.bar(x, hd, color="tab:red")
    ax2.set_xticks(x, regions, rotation=20)
    ax2.set_ylabel("hd95 (px)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_ablation_chart(rows: list[AblationRow], path) -> Path:
    path = Path(path)
    labels = []
    for r in rows:
        on = [n for n, f in (("in", r.input_csa), ("csa", r.skip_csa), ("ag", r.skip_ag)) if f]
        labels.append("+".join(on) if on else "none")
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(np.arange(len(rows)), [r.dsc for r in rows], color="tab:blue")
    ax.set_xticks(np.arange(len(rows)), labels, rotation=30)
    ax.set_ylabel("test DSC")
    lo = min(r.dsc for r in rows)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_mask_overlay(image: np.ndarray, truth: np.ndarray, pred: np.ndarray, path) -> Path:
    """Composite audit image: ground truth green, prediction red, their
    overlap yellow, over the grayscale input slice."""
    path = Path(path)
    gray = np.clip(image * 255.0, 0, 255).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    t = truth.astype(bool)
    p = pred.astype(bool)
    rgb[t & ~p] = (0, 200, 0)
    rgb[p & ~t] = (220, 0, 0)
    rgb[t & p] = (230, 220, 0)
    Image.fromarray(rgb, mode="RGB").save(path)
    return path
