"""Adaptation-curve figures (similarity and MCD versus adaptation step)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import AdaptationCurve  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 150,
}
COLORS = {"meta": "#c0392b", "baseline": "#2c3e50"}
LABELS = {"meta": "meta-learned init", "baseline": "pretrain-finetune"}
CONDITIONS = {"cross": "cross-cluster style transfer", "intra": "intra-cluster style transfer"}


def mean_curve(curves: Sequence[AdaptationCurve], mode: str, key: str):
    sel = [c for c in curves if c.mode == mode]
    steps = np.array([p["step"] for p in sel[0].points])
    vals = np.array([[p[key] for p in c.points] for c in sel])
    return steps, vals.mean(0), vals.min(0), vals.max(0)


def plot_condition(curves: Sequence[AdaptationCurve], condition: str):
    """Two panels (similarity, MCD), both modes overlaid, min-max band over cells."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
        for ax, metric, ylabel in (
            (axes[0], "similarity", "speaker cosine similarity"),
            (axes[1], "mcd", "MCD (dB)"),
        ):
            for mode in ("meta", "baseline"):
                if not any(c.mode == mode for c in curves):
                    continue
                x, mean, lo, hi = mean_curve(curves, mode, f"{metric}_{condition}")
                xp = np.maximum(x, 1)
                ax.plot(xp, mean, marker="o", ms=3, color=COLORS[mode], label=LABELS[mode])
                ax.fill_between(xp, lo, hi, color=COLORS[mode], alpha=0.15, lw=0)
            ax.set_xscale("log")
            ax.set_xlabel("adaptation step")
            ax.set_ylabel(ylabel)
        axes[0].legend(loc="lower right")
        fig.suptitle(f"5-shot {CONDITIONS[condition]}")
        fig.tight_layout()
    return fig


def plot_curves(curves: Sequence[AdaptationCurve], out_dir: str | Path, formats: Sequence[str] = ("png", "svg")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for condition in CONDITIONS:
        fig = plot_condition(curves, condition)
        for fmt in formats:
            path = out / f"adaptation_{condition}.{fmt}"
            fig.savefig(path, metadata={"Date": None} if fmt == "svg" else None)
            written.append(path)
        plt.close(fig)
    return written
