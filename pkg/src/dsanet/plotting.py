"""Matplotlib figures written next to the CSV/JSON run outputs.

Everything renders off-screen (Agg) and is saved to a file; nothing is shown.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}

LOSS_COLORS = {"total": "#1b1f8a", "focal": "#941b22", "box": "#1f8a1b", "confidence": "#8a6d1b"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(trace: Sequence[dict], path, steps_per_epoch: int | None = None, title: str = "") -> Path:
    """Per-step loss components; dotted verticals mark epoch boundaries."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        steps = np.arange(1, len(trace) + 1)
        for key, color in LOSS_COLORS.items():
            vals = np.array([t[key] for t in trace], dtype=float)
            if key == "confidence" and not vals.any():
                continue
            ax.plot(steps, vals, lw=1.0 if key == "total" else 0.7, color=color, label=key)
        if steps_per_epoch:
            for x in range(steps_per_epoch, len(trace), steps_per_epoch):
                ax.axvline(x + 0.5, color="0.8", lw=0.5, ls=":")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_ablation(rows: Sequence[tuple[str, dict]], path, metrics=("AP", "AP50", "AP75")) -> Path:
    """Grouped bars of selected metrics, one group per config."""
    with plt.rc_context(RC):
        names = [r[0] for r in rows]
        fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(names) + 1.5), 3))
        width = 0.8 / len(metrics)
        x = np.arange(len(names))
        for i, m in enumerate(metrics):
            vals = [max(0.0, r[1][m]) for r in rows]  # -1 marks an empty size bucket
            ax.bar(x + (i - (len(metrics) - 1) / 2) * width, vals, width, label=m)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel("score")
        ax.legend(frameon=False, ncol=len(metrics))
        return _save(fig, path)


def plot_heatmap(values: np.ndarray, path, title: str = "", marker: tuple[int, int] | None = None) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3, 3))
        im = ax.imshow(values, cmap="magma", interpolation="nearest")
        if marker is not None:
            ax.plot(marker[1], marker[0], "c+", ms=8)
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_xticks([])
        ax.set_yticks([])
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_cost_scaling(reports, path) -> Path:
    """Attention-core madds against N on log axes, with the cubic expression for comparison."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        by_variant: dict[str, list] = {}
        for r in reports:
            by_variant.setdefault(r.variant, []).append(r)
        for variant, rs in sorted(by_variant.items()):
            rs = sorted(rs, key=lambda r: r.N)
            ax.plot([r.N for r in rs], [r.attention_madds for r in rs], "o-", ms=3, lw=1, label=f"{variant} (QK^T + AV)")
        rs = sorted(reports, key=lambda r: r.N)
        ax.plot([r.N for r in rs], [r.paper_formula_value for r in rs], "k--", lw=0.8, label="C N^3")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("N = H W")
        ax.set_ylabel("multiply-accumulates")
        ax.legend(frameon=False)
        return _save(fig, path)
