"""Report rendering: tab-delimited tables and matplotlib figures.

Every CLI path that produces numbers writes them as TSV next to PNG
figures in the run directory, so results are both diffable and viewable.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .encoder import Trajectory
from .policy import PolicyModel


def write_table(path: str, rows: list[dict], columns: list[str] | None = None) -> None:
    """Tab-separated values with a header row."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    if not rows:
        with open(path, "w") as f:
            f.write("\n")
        return
    columns = columns or list(rows[0].keys())
    with open(path, "w") as f:
        f.write("\t".join(columns) + "\n")
        for row in rows:
            f.write("\t".join(_fmt(row.get(c, "")) for c in columns) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def save_loss_curves(log_rows: list[dict], path: str) -> None:
    """Stacked view of the loss components over iterations."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    it = [r["iteration"] for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for key, label in (("rep", "representation"), ("div", "diversity"),
                       ("int", "anchor"), ("im", "imitation")):
        ax1.plot(it, [r[key] for r in log_rows], label=label, linewidth=1.2)
    ax1.legend(loc="upper right", fontsize=8)
    ax1.set_ylabel("component loss")
    ax2.plot(it, [r["total"] for r in log_rows], color="black", linewidth=1.4)
    ax2.set_ylabel("total loss")
    ax2.set_xlabel("iteration")
    marks = [r["iteration"] for i, r in enumerate(log_rows)
             if i and r["edits"] != log_rows[i - 1]["edits"]]
    for m in marks:
        ax1.axvline(m, color="red", alpha=0.4, linestyle="--", linewidth=0.8)
        ax2.axvline(m, color="red", alpha=0.4, linestyle="--", linewidth=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_prototype_clusters(model: PolicyModel, trajectories: list[Trajectory],
                            assignment: np.ndarray, path: str,
                            explanations: list[Trajectory] | None = None) -> None:
    """One panel per prototype: member action series translucent, the
    explanation trajectory emphasized."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    k = model.protos.k
    cols = min(k, 3)
    rows = (k + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 2.6 * rows), squeeze=False)
    for j in range(k):
        ax = axes[j // cols][j % cols]
        member_rows = np.nonzero(assignment == j)[0]
        for i in member_rows:
            ax.plot(trajectories[i].labelled_actions, color="steelblue", alpha=0.25,
                    linewidth=0.7)
        if explanations is not None:
            ax.plot(explanations[j].labelled_actions, color="crimson", linewidth=1.6)
        title = f"prototype {model.protos.ids[j]} ({member_rows.size} members)"
        if member_rows.size == 0:
            title += " [redundant?]"
        ax.set_title(title, fontsize=9)
        ax.set_ylim(0.0, 1.05)
    for j in range(k, rows * cols):
        axes[j // cols][j % cols].axis("off")
    fig.suptitle("expert-rate series per prototype cluster", fontsize=11)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_bars(rows: list[dict], risk_key: str, benefit_key: str, path: str) -> None:
    """Side-by-side risk/benefit bars across approaches."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    names = [r["approach"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.2))
    x = np.arange(len(names))
    ax1.bar(x, [r[risk_key] for r in rows], color="indianred")
    ax1.set_xticks(x, names, rotation=25, ha="right", fontsize=8)
    ax1.set_title(f"risk: {risk_key}", fontsize=10)
    ax2.bar(x, [r[benefit_key] for r in rows], color="seagreen")
    ax2.set_xticks(x, names, rotation=25, ha="right", fontsize=8)
    ax2.set_title(f"benefit: {benefit_key}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_figure(summary: list[dict], path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    ks = [r["k"] for r in summary]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.errorbar(ks, [r["risk_mean"] for r in summary],
                 yerr=[r["risk_std"] for r in summary], marker="o", color="indianred")
    ax1.set_xlabel("prototype count")
    ax1.set_title("risk vs K", fontsize=10)
    ax2.errorbar(ks, [r["benefit_mean"] for r in summary],
                 yerr=[r["benefit_std"] for r in summary], marker="o", color="seagreen")
    ax2.set_xlabel("prototype count")
    ax2.set_title("benefit vs K", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
