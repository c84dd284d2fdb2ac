"""CSV summaries and matplotlib figures for training, evaluation and ablation runs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .train import Metrics  # noqa: E402

GROUPS = ("head", "medium", "tail")


def write_csv(rows: Sequence[dict], path, columns: Sequence[str] | None = None) -> Path:
    """Write dict rows; columns default to the union of keys in first-seen order."""
    path = Path(path)
    if columns is None:
        columns = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return path


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def metrics_rows(name: str, m: Metrics) -> list[dict]:
    """One summary row: overall, group and per-class accuracy."""
    row = {"run": name, "accuracy": m.accuracy, "n": m.n}
    row.update({g: m.groups.get(g, float("nan")) for g in GROUPS})
    row.update({f"class_{j}": a for j, a in enumerate(m.per_class)})
    return [row]


def loss_curves(history: Sequence[dict], path) -> Path:
    """Training loss terms and validation accuracy per epoch."""
    path = Path(path)
    epochs = [h["epoch"] for h in history]
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total", "fusion", "fcl", "inter"):
        vals = [h.get(key, 0.0) for h in history]
        if any(vals):
            ax_l.plot(epochs, vals, label=key)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_l.legend()
    ax_a.plot(epochs, [h["val_accuracy"] for h in history], color="tab:green")
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("validation accuracy")
    ax_a.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def per_class_bars(m: Metrics, counts: Sequence[int], path, title: str = "") -> Path:
    """Per-class accuracy with training-set size annotated on each bar."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(m.per_class) + 2), 4))
    xs = range(len(m.per_class))
    bars = ax.bar(xs, m.per_class, color="tab:blue")
    for bar, n in zip(bars, counts):
        ax.annotate(f"n={n}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_xticks(list(xs))
    ax.set_xlabel("class (sorted by training size)")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.1)
    ax.set_title(title or f"overall {m.accuracy:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def ablation_bars(rows: Sequence[dict], path) -> Path:
    """Mean accuracy per variant with seed std as error bars, plus group means."""
    path = Path(path)
    names = [r["variant"] for r in rows]
    fig, (ax, ax_g) = plt.subplots(1, 2, figsize=(11, 4))
    ax.bar(names, [r["accuracy"] for r in rows], yerr=[r.get("std", 0.0) for r in rows],
           color="tab:orange", capsize=3)
    ax.set_ylabel("mean test accuracy")
    ax.set_ylim(0, 1)
    width = 0.8 / len(GROUPS)
    for i, g in enumerate(GROUPS):
        ax_g.bar([j + i * width for j in range(len(rows))], [r.get(g, 0.0) for r in rows],
                 width=width, label=g)
    ax_g.set_xticks([j + width for j in range(len(rows))])
    ax_g.set_xticklabels(names)
    ax_g.set_ylim(0, 1)
    ax_g.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
