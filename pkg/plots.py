import csv
import logging
import math
import os
from collections import defaultdict
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from errors import PlotSchemaError  # noqa: E402
from report_generator import SCORE_COLUMNS  # noqa: E402

logger = logging.getLogger(__name__)


def _read_scores(csv_path: str) -> Dict[str, List[dict]]:
    with open(csv_path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in SCORE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise PlotSchemaError(missing, SCORE_COLUMNS)
        by_pruner: Dict[str, List[dict]] = defaultdict(list)
        for row in reader:
            by_pruner[row["pruner"]].append(row)
    return by_pruner


def _floats(rows: List[dict], column: str) -> np.ndarray:
    return np.array([float(r[column]) if r[column] else math.nan for r in rows])


def plot_score_curves(by_pruner: Dict[str, List[dict]], out_path: str):
    """Score vs position, raw and debiased, one curve pair per pruner that scores tokens."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for pruner, rows in by_pruner.items():
        pos = _floats(rows, "position")
        raw, deb = _floats(rows, "raw_score"), _floats(rows, "debiased_score")
        if np.all(np.isnan(raw)):
            continue
        ax.plot(pos, raw, label=f"{pruner} raw", linewidth=1.0)
        if not np.allclose(raw, deb, equal_nan=True):
            ax.plot(pos, deb, label=f"{pruner} debiased", linewidth=1.0, linestyle="--")
    ax.set_xlabel("visual token position")
    ax.set_ylabel("last-text-token logit")
    ax.set_title("Attention score by position")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_retention_strip(by_pruner: Dict[str, List[dict]], out_path: str):
    """Fraction of each frame's tokens kept, one row per pruner."""
    names = list(by_pruner)
    strips = []
    for pruner in names:
        rows = by_pruner[pruner]
        frames = _floats(rows, "frame").astype(int)
        kept = _floats(rows, "retained")
        n_frames = int(frames.max()) + 1
        strips.append(np.bincount(frames, weights=kept, minlength=n_frames) / np.bincount(frames, minlength=n_frames))
    width = max(len(s) for s in strips)
    grid = np.full((len(strips), width), np.nan)
    for i, s in enumerate(strips):
        grid[i, :len(s)] = s
    fig, ax = plt.subplots(figsize=(8, 0.6 * len(names) + 1.2))
    im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.set_xlabel("frame")
    fig.colorbar(im, ax=ax, label="retained fraction")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def emit_plots(csv_path: str, out_dir: str) -> List[str]:
    """Renders plots from scores.csv. Raises PlotSchemaError when columns are missing."""
    by_pruner = _read_scores(csv_path)
    if not by_pruner:
        logger.warning(f"No score rows in {csv_path}; nothing to plot")
        return []
    os.makedirs(out_dir, exist_ok=True)
    outputs = [os.path.join(out_dir, "scores_by_position.png"), os.path.join(out_dir, "retention_by_frame.png")]
    plot_score_curves(by_pruner, outputs[0])
    plot_retention_strip(by_pruner, outputs[1])
    logger.info(f"Wrote plots: {', '.join(outputs)}")
    return outputs
