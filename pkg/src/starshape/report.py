"""Plot and summary emitters. Pure renderers: nothing is recomputed here."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError


def plot_training_log(csv_path, out_png) -> Path:
    """Loss-vs-step curves from a training log."""
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "step" not in rows[0]:
        raise ConfigError(f"{csv_path} is not a training log")
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for column, label in (("d_loss", "discriminator"), ("g_loss", "generator")):
        ax.plot(steps, [float(r[column]) for r in rows], label=label, linewidth=1)
    if rows[0].get("penalty"):
        ax.plot(steps, [float(r["penalty"]) for r in rows], label="penalty", linewidth=1)
    ax.set_xlabel("generator step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_c2st_report(report: dict, out_png) -> Path:
    """Per-split score bars with the median line."""
    if "per_split_scores" not in report:
        raise ConfigError("not a two-sample-test report: missing per_split_scores")
    scores = report["per_split_scores"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(scores)), scores, color="#4477aa")
    ax.axhline(report["median"], color="#cc3311", linewidth=1.5,
               label=f"median {report['median']:.3g} (mad {report['mad']:.2g})")
    ax.set_xlabel("split")
    ax.set_ylabel(f"{report['flavor']} score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_recon_scatter(scatter: dict, out_png) -> Path:
    """Reconstruction error (x) against latent NLL (y) with baseline guides."""
    points = scatter.get("points")
    if not points:
        raise ConfigError("scatter dataset has no points")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    guides = scatter.get("guides", {})
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    ax.scatter(xs, ys, s=12, alpha=0.7, color="#4477aa")
    if "nn_median_l2" in guides:
        ax.axvline(guides["nn_median_l2"], color="gray", linewidth=1.2)
    if "nll_mean" in guides:
        mean, std = guides["nll_mean"], guides.get("nll_std", 0.0)
        ax.axhline(mean, color="gray", linewidth=1.2)
        ax.axhline(mean + 3 * std, color="gray", linewidth=0.8, linestyle="--")
        ax.axhline(mean - 3 * std, color="gray", linewidth=0.8, linestyle="--")
    ax.set_xlabel("reconstruction error")
    ax.set_ylabel("latent NLL")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_score_matrix(classes, medians, mads, out_png) -> Path:
    """All-pairs score heat table; the diagonal (self comparisons) is shaded."""
    medians = np.asarray(medians)
    fig, ax = plt.subplots(figsize=(1.1 * len(classes) + 2, 1.0 * len(classes) + 1.5))
    ax.imshow(medians, cmap="viridis")
    for i in range(len(classes)):
        for j in range(len(classes)):
            weight = "bold" if i == j else "normal"
            ax.text(
                j, i, f"{medians[i][j]:.1f}\n±{np.asarray(mads)[i][j]:.1f}",
                ha="center", va="center", color="white", fontsize=8, fontweight=weight,
            )
    ax.set_xticks(range(len(classes)), classes, rotation=45, ha="right")
    ax.set_yticks(range(len(classes)), classes)
    ax.set_xlabel("test class")
    ax.set_ylabel("train class")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def save_strip_png(strip: np.ndarray, out_png, upscale: int = 2) -> Path:
    """Render a cell-cycle strip: rows are frames, columns [red, green_1..c].

    The red column is tinted red and the green columns green, matching how
    the channels are displayed in composite cell images.
    """
    n_frames, n_cols, h, w = strip.shape
    pad = 2
    canvas = np.zeros((n_frames * (h + pad) - pad, n_cols * (w + pad) - pad, 3), dtype=np.float32)
    for i in range(n_frames):
        for j in range(n_cols):
            tile = (np.clip(strip[i, j], -1, 1) + 1.0) / 2.0
            y, x = i * (h + pad), j * (w + pad)
            canvas[y : y + h, x : x + w, 0 if j == 0 else 1] = tile
    canvas = np.kron(canvas, np.ones((upscale, upscale, 1), dtype=np.float32))
    from PIL import Image

    Image.fromarray((canvas * 255).astype(np.uint8)).save(out_png)
    return Path(out_png)


def write_markdown_summary(sections: dict, out_md) -> Path:
    """A small markdown report: one section per rendered artifact."""
    lines = ["# Run summary", ""]
    for title, body in sections.items():
        lines += [f"## {title}", "", body, ""]
    Path(out_md).write_text("\n".join(lines))
    return Path(out_md)


def matrix_to_markdown(classes, medians, mads) -> str:
    header = "| train \\ test | " + " | ".join(classes) + " |"
    sep = "|" + "---|" * (len(classes) + 1)
    rows = [header, sep]
    for i, label in enumerate(classes):
        cells = [f"{medians[i][j]:.2f} ± {mads[i][j]:.2f}" for j in range(len(classes))]
        rows.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(rows)
