"""Figures for sweep and ablation results, rendered next to their CSV files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

VARIANT_LABELS = {"ctce": "with MAR", "no_mar": "without MAR", "no_coop": "no cooperation"}


def plot_sweep(rows: Sequence[dict], path: str | Path) -> Path:
    """mAP against packet drop rate, one line per variant."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    variants = sorted({r["variant"] for r in rows}, key=lambda v: list(VARIANT_LABELS).index(v)
                      if v in VARIANT_LABELS else 99)
    for v in variants:
        pts = sorted((r["pdr"], r["mAP"]) for r in rows if r["variant"] == v)
        ax.plot([p for p, _ in pts], [m for _, m in pts], marker="o", label=VARIANT_LABELS.get(v, v))
    ax.set_xlabel("packet drop rate")
    ax.set_ylabel("mAP")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(rows: Sequence[dict], path: str | Path, label_key: str = "name") -> Path:
    """Bar chart of mAP per ablation row."""
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows) + 1.5), 3.8))
    labels = [str(r[label_key]) for r in rows]
    values = [r["mAP"] for r in rows]
    bars = ax.bar(range(len(rows)), values, color="tab:blue")
    for b, v in zip(bars, values):
        ax.text(b.get_x() + b.get_width() / 2, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(rows)), labels, rotation=20)
    ax.set_ylabel("mAP")
    ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
