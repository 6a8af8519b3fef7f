"""Rendered figures for the reporting paths.

Every report command drops PNGs next to its delimited output.  Each
function takes already-computed data, writes one file and returns its
path; nothing here recomputes analysis results.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def training_curves(metrics, path) -> Path:
    """Accuracy and loss per epoch; one line per head, test solid, train dashed."""
    heads = sorted({r.head_index for r in metrics})
    cmap = plt.get_cmap("viridis")
    colors = {h: cmap(i / max(len(heads) - 1, 1)) for i, h in enumerate(heads)}
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    for split, style in (("train", "--"), ("test", "-")):
        for h in heads:
            rows = sorted((r.epoch, r) for r in metrics if r.split == split and r.head_index == h)
            if not rows:
                continue
            epochs = [e for e, _ in rows]
            name = f"head {h}" + (" (final)" if h == heads[-1] and len(heads) > 1 else "")
            label = f"{name} {split}" if len(heads) <= 4 else (f"{name}" if split == "test" else None)
            ax_acc.plot(epochs, [r.accuracy for _, r in rows], style, color=colors[h], label=label)
            ax_loss.plot(epochs, [r.loss for _, r in rows], style, color=colors[h])
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend(fontsize=7)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    return _finish(fig, path)


def cost_profile_figure(fractions, placements, targets, path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.step(range(len(fractions)), fractions, where="mid", label="cumulative cost")
    for t in targets:
        ax.axhline(t, color="grey", lw=0.5, ls=":")
    if placements:
        ax.plot(placements, [fractions[i] for i in placements], "o", color="crimson", label="head placements")
    ax.set_xlabel("layer index")
    ax.set_ylabel("fraction of total FLOPs")
    ax.legend()
    return _finish(fig, path)


def exit_counts_figure(exit_counts, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    heads = list(range(len(exit_counts)))
    ax.bar(heads, exit_counts, color="steelblue")
    labels = [str(h) for h in heads]
    labels[-1] += " (final)"
    ax.set_xticks(heads, labels)
    ax.set_xlabel("exit head")
    ax.set_ylabel("samples")
    if title:
        ax.set_title(title)
    return _finish(fig, path)


def head_accuracy_figure(per_head, path, second=None, labels=("", "")) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = list(range(len(per_head)))
    ax.plot(xs, per_head, "o-", label=labels[0] or None)
    if second is not None:
        ax.plot(list(range(len(second))), second, "s--", label=labels[1] or None)
    ticks = [str(h) for h in xs]
    ticks[-1] += " (final)"
    ax.set_xticks(xs, ticks)
    ax.set_xlabel("head")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    if labels[0] or labels[1]:
        ax.legend()
    return _finish(fig, path)


def confusion_histogram_figure(rows, path, mean_correct=None, mean_wrong=None) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    lows = [r[0] for r in rows]
    width = rows[0][1] - rows[0][0] if rows else 1.0
    ax.bar(lows, [r[2] for r in rows], width=width, align="edge", alpha=0.6, label="correct")
    ax.bar(lows, [r[3] for r in rows], width=width, align="edge", alpha=0.6, label="wrong")
    if mean_correct is not None:
        ax.axvline(mean_correct, color="tab:blue", ls="-", lw=1)
    if mean_wrong is not None:
        ax.axvline(mean_wrong, color="tab:orange", ls="--", lw=1)
    ax.set_xlabel("normalized confusion score")
    ax.set_ylabel("samples")
    ax.legend()
    return _finish(fig, path)


def attack_success_figure(per_head_success, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = list(range(len(per_head_success)))
    ax.plot(xs, per_head_success, "o-", color="darkred")
    ticks = [str(h) for h in xs]
    ticks[-1] += " (final)"
    ax.set_xticks(xs, ticks)
    ax.set_xlabel("head")
    ax.set_ylabel("attack success rate")
    ax.set_ylim(0, 1.02)
    return _finish(fig, path)
