"""Static figure emission: loss curves, sweep bars, per-class IoU, qualitative panels.

Output is file-based only (PNG); nothing is served interactively.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataValidationError

PART_PANEL_COLORS = np.array(
    [
        [0.15, 0.15, 0.15],  # background
        [0.35, 0.62, 0.30],
        [0.75, 0.30, 0.25],
        [0.25, 0.40, 0.75],
        [0.80, 0.70, 0.25],
        [0.70, 0.35, 0.70],
        [0.25, 0.70, 0.70],
        [0.85, 0.55, 0.20],
        [0.55, 0.45, 0.30],
    ]
)


def _read_jsonl(path: Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"metrics file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _read_report(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"report file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def plot_loss_curve(metrics_path: Path, out_path: Path) -> Path:
    records = [r for r in _read_jsonl(metrics_path) if "loss_total" in r]
    if not records:
        raise DataValidationError(f"no loss records in {metrics_path}")
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r["loss_total"] for r in records], label="total", lw=1.2)
    ax.plot(steps, [r["loss_vcl"] for r in records], label="visual", lw=0.8, alpha=0.7)
    if any(r.get("loss_tcl") is not None for r in records):
        ax.plot(
            steps,
            [r["loss_tcl"] for r in records],
            label="textual",
            lw=0.8,
            alpha=0.7,
        )
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_sweep_bars(report_path: Path, out_path: Path) -> Path:
    report = _read_report(report_path)
    rows = report["rows"]
    labels = [
        str(r.get("momentum", r.get("label", i))) for i, r in enumerate(rows)
    ]
    means = [r["miou_mean"] for r in rows]
    stds = [r.get("miou_std", 0.0) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(rows)), means, yerr=stds, capsize=3, color="#4878a8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels)
    ax.set_ylabel("mean IoU")
    ax.set_xlabel("momentum" if report.get("kind") == "sweep_m" else "variant")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_per_class_iou(eval_report: dict, out_path: Path) -> Path:
    per_category = eval_report.get("per_category", {})
    if not per_category:
        raise DataValidationError("evaluation report has no per-category data")
    names = sorted(per_category)
    means = [per_category[n]["mean"] for n in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(names)), means, color="#56a86e")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("mean IoU")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def _mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    palette = PART_PANEL_COLORS
    clipped = np.clip(mask, 0, len(palette) - 1)
    return palette[clipped]


def plot_qualitative(
    image: np.ndarray, gt_mask: np.ndarray, predicted: np.ndarray, out_path: Path
) -> Path:
    """Three-panel figure: query image, ground-truth mask, predicted mask."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    axes[0].imshow(np.transpose(image, (1, 2, 0)))
    axes[0].set_title("query")
    axes[1].imshow(_mask_to_rgb(gt_mask))
    axes[1].set_title("ground truth")
    axes[2].imshow(_mask_to_rgb(predicted))
    axes[2].set_title("prediction")
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
