"""Figure rendering for training, fine-tuning, and evaluation reports.

Each report-producing command writes its line-delimited JSON (or metrics
JSON) and a PNG rendered from the same records, so a run directory is
readable at a glance without any extra tooling.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def plot_training_history(history: list[dict], path) -> None:
    """Train NLL and validation perplexity per epoch, twin axes."""
    epochs = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(epochs, [r["train_nll"] for r in history],
            color="tab:blue", marker="o", markersize=3, label="train NLL")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train NLL / example", color="tab:blue")
    ax.tick_params(axis="y", labelcolor="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["valid_ppl"] for r in history],
             color="tab:red", marker="s", markersize=3, label="valid ppl")
    ax2.set_ylabel("validation perplexity", color="tab:red")
    ax2.tick_params(axis="y", labelcolor="tab:red")
    ax.set_title("supervised training")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_rl_history(history: list[dict], path) -> None:
    """Reward and baseline trajectory with the anchor distance alongside."""
    steps = [r["step"] for r in history]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(steps, [r["mean_reward"] for r in history],
            color="tab:blue", alpha=0.6, label="mean reward")
    ax.plot(steps, [r["baseline"] for r in history],
            color="tab:orange", label="baseline")
    ax.set_xlabel("step")
    ax.set_ylabel("reward")
    ax.legend(loc="upper left")
    ax2 = ax.twinx()
    ax2.plot(steps, [r["anchor_distance"] for r in history],
             color="tab:green", linestyle="--", label="anchor distance")
    ax2.set_ylabel("anchor distance", color="tab:green")
    ax2.tick_params(axis="y", labelcolor="tab:green")
    ax.set_title("policy fine-tuning")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(metrics: dict, path) -> None:
    """Bar chart of the scalar entries of an evaluation report."""
    items = [(k, v) for k, v in metrics.items()
             if isinstance(v, (int, float))]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    names = [k for k, _ in items]
    values = [v for _, v in items]
    ax.bar(range(len(items)), values, color="tab:blue")
    ax.set_xticks(range(len(items)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    for i, v in enumerate(values):
        ax.annotate(f"{v:.3g}", (i, v), ha="center", va="bottom", fontsize=7)
    ax.set_title("evaluation metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
