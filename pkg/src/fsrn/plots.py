"""Figure emission: loss curves, per-class PR curves, ablation and
receptive-field summaries. All functions write PNG files and return the path."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import Detection, GroundTruth, precision_recall


def _smooth(values, window: int = 25):
    if len(values) < window:
        return np.asarray(values)
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def read_loss_log(path) -> list[dict]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entries.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: bad log line: {exc}") from exc
    return entries


def plot_loss_curves(entries: list[dict], out_path) -> Path:
    """Total plus per-component training curves, lightly smoothed."""
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    episodes = [e["episode"] for e in entries]
    for key, style in (("total", "-"), ("focal", "--"), ("loc", ":"), ("max_margin", "-.")):
        values = [e[key] for e in entries]
        smoothed = _smooth(values)
        xs = episodes[len(episodes) - len(smoothed):]
        ax.plot(xs, smoothed, style, label=key)
    ax.set_xlabel("episode")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_pr_curves(
    detections: list[Detection],
    ground_truths: list[GroundTruth],
    out_path,
    class_names: dict[int, str] | None = None,
    iou_threshold: float = 0.5,
) -> Path:
    out_path = Path(out_path)
    curves = precision_recall(detections, ground_truths, iou_threshold)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for cid, (recall, precision) in curves.items():
        label = class_names.get(cid, str(cid)) if class_names else str(cid)
        if len(recall):
            ax.plot(np.concatenate([[0.0], recall]),
                    np.concatenate([[precision[0]], precision]), label=label)
        else:
            ax.plot([0.0], [0.0], "x", label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"PR at IoU {iou_threshold:.2f}")
    ax.legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_ablation(rows, out_path) -> Path:
    """Grouped bars: bAP50/nAP50 per configuration."""
    out_path = Path(out_path)
    names = [row.name for row in rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.bar(x - 0.18, [100 * row.bAP50 for row in rows], width=0.36, label="bAP50")
    ax.bar(x + 0.18, [100 * row.nAP50 for row in rows], width=0.36, label="nAP50")
    ax.set_xticks(x, names)
    ax.set_ylabel("AP50 (x100)")
    ax.set_title("ablation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_rf_sweep(sweep: dict, out_path, anchor_extent: float | None = None) -> Path:
    """Novel AP against the post-fusion receptive field."""
    out_path = Path(out_path)
    rfs = sorted(sweep)
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(rfs, [100 * sweep[rf].nAP50 for rf in rfs], "o-", label="nAP50")
    ax.plot(rfs, [100 * sweep[rf].bAP50 for rf in rfs], "s--", label="bAP50")
    if anchor_extent is not None:
        ax.axvline(anchor_extent, color="gray", lw=1, ls=":", label="largest anchor")
    ax.set_xlabel("post-fusion receptive field (cells)")
    ax.set_ylabel("AP50 (x100)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
