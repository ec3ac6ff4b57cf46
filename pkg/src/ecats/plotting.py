"""Static SVG figures for the CLI: robustness scatter, dataset overview, training curves."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CLASS_COLORS = {0: "tab:blue", 1: "tab:red"}
CLASS_NAMES = {0: "regular", 1: "anomalous"}


def robustness_scatter(report, path, title: str | None = None) -> None:
    """Robustness at t=0 against trajectory index, one colour per class, zero line dashed."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    labels = np.array([y for _, y, _ in report])
    rho = np.array([r for _, _, r in report], dtype=float)
    idx = np.arange(len(report))
    for y in sorted(set(labels.tolist())):
        m = labels == y
        ax.scatter(idx[m], rho[m], s=10, c=CLASS_COLORS.get(y, "gray"), label=CLASS_NAMES.get(y, str(y)))
    ax.axhline(0.0, color="black", lw=0.8, ls="--")
    ax.set_xlabel("trajectory")
    ax.set_ylabel("robustness")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def dataset_plot(data, path, var: int = 0) -> None:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for traj, y in zip(data.trajectories, data.labels):
        ax.plot(traj.times, traj.values[:, var], lw=0.6, alpha=0.5, c=CLASS_COLORS.get(y, "gray"))
    ax.set_xlabel("time")
    ax.set_ylabel(f"x_{var}")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def history_plot(histories, path) -> None:
    """Training loss per epoch, one line per seed."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for seed, hist in histories.items():
        ax.plot([h["epoch"] for h in hist], [h["loss"] for h in hist], label=f"seed {seed}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
