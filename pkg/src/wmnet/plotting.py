"""Figures for training logs and ablation tables, written straight to files."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.5,
}


def read_jsonl(path: str | Path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def plot_history(records: Sequence[dict], out: str | Path) -> Path:
    """Training loss per epoch (and mAP, when logged) from metrics.jsonl records."""
    train = [r for r in records if r.get("kind", "train") == "train"]
    if not train:
        raise ValueError("log holds no training records")
    runs: Dict[str, List[dict]] = {}
    for r in train:
        runs.setdefault(r.get("config_hash", "run"), []).append(r)
    with_map = any("mAP@0.5" in r for r in train)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2 if with_map else 1, figsize=(8 if with_map else 4.5, 3), squeeze=False)
        for name, rows in runs.items():
            axes[0, 0].plot([r["epoch"] for r in rows], [r["loss"] for r in rows], label=name)
            if with_map:
                scored = [r for r in rows if "mAP@0.5" in r]
                axes[0, 1].plot([r["epoch"] for r in scored], [r["mAP@0.5"] for r in scored], "o-", label=name)
        axes[0, 0].set(xlabel="epoch", ylabel="train loss", yscale="log")
        if with_map:
            axes[0, 1].set(xlabel="epoch", ylabel="val mAP@0.5", ylim=(0, 1))
        if len(runs) > 1:
            axes[0, 0].legend()
        return _save(fig, out)


def plot_table(rows: Sequence[dict], label_key: str, out: str | Path, title: str = "") -> Path:
    """Bar chart of mean mAP@0.5 with per-seed spread for ablation or sweep rows."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(rows) + 1.5), 3))
        xs = range(len(rows))
        means = [r["mAP@0.5"] for r in rows]
        spread = [r.get("mAP@0.5_std", 0.0) for r in rows]
        ax.bar(xs, means, yerr=spread, color="0.6", edgecolor="0.2", capsize=3)
        ax.set_xticks(list(xs))
        ax.set_xticklabels([str(r[label_key]) for r in rows], rotation=30, ha="right")
        lo = min(means) - max(spread + [0.0]) - 0.05
        ax.set(ylabel="mAP@0.5", ylim=(max(0.0, lo), 1.0), title=title)
        return _save(fig, out)


def _save(fig, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    return out
