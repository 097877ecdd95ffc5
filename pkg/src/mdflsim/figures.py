"""Figure rendering for the report paths: every CSV the runner emits gets a
matching PNG next to it. The CSVs remain the machine-readable contract."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

FIG_SIZE = (6.4, 4.0)
SCHEDULER_STYLES = {
    "mappo": {"color": "tab:blue", "marker": "o"},
    "dfl": {"color": "tab:orange", "marker": "s"},
    "random": {"color": "tab:green", "marker": "^"},
}


def run_metrics_figure(metrics_rows, path) -> Path:
    """Per-round accuracy and cumulative energy of one run."""
    path = Path(path)
    fig, (ax_acc, ax_energy) = plt.subplots(2, 1, figsize=(6.4, 6.0), sharex=True)
    if metrics_rows:
        rounds = [row[0] for row in metrics_rows]
        ax_acc.plot(rounds, [row[1] for row in metrics_rows], "o-",
                    color="tab:blue")
        ax_energy.plot(rounds, [float(row[2]) for row in metrics_rows], "s-",
                       color="tab:red")
    ax_acc.set_ylabel("mean validation accuracy")
    ax_acc.grid(True, alpha=0.3)
    ax_energy.set_ylabel("total energy spent")
    ax_energy.set_xlabel("communication round")
    ax_energy.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def sweep_figure(rows, axis: str, ylabel: str, path) -> Path:
    """One line per scheduler across the swept axis values."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    xs = [float(row[0]) for row in rows]
    for idx, name in enumerate(("mappo", "dfl", "random"), start=1):
        ax.plot(xs, [float(row[idx]) for row in rows], label=name,
                **SCHEDULER_STYLES[name])
    ax.set_xlabel(axis)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def training_curve_figure(curve_rows, path) -> Path:
    """Accumulated reward per training episode."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    if curve_rows:
        episodes = [row[0] for row in curve_rows]
        rewards = [row[1] for row in curve_rows]
        ax.plot(episodes, rewards, color="tab:blue", linewidth=1.0)
    ax.set_xlabel("episode")
    ax.set_ylabel("accumulated reward")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
