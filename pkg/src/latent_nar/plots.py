"""Report figures, each saved as PNG with a sibling ``.caption.txt``."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402


def save_figure(fig: plt.Figure, out_dir: Path, filename: str, caption: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outpath = out_dir / filename
    fig.tight_layout()
    fig.savefig(outpath, dpi=300, bbox_inches="tight")
    plt.close(fig)
    outpath.with_suffix(".caption.txt").write_text(caption + "\n", encoding="utf-8")
    return outpath


def plot_refinement_steps(per_step: pd.DataFrame, out_dir: Path) -> Path:
    """ELBO (left axis) and BLEU (right axis) against the refinement step."""
    sns.set_style("whitegrid")
    fig, ax1 = plt.subplots(figsize=(7, 4.5))
    color_left, color_right = "tab:blue", "tab:red"

    ax1.plot(per_step["step"], per_step["elbo"], color=color_left, marker="o", label="ELBO")
    ax1.set_xlabel("Refinement step")
    ax1.set_ylabel("Mean ELBO", color=color_left)
    ax1.tick_params(axis="y", labelcolor=color_left)
    ax1.set_xticks(per_step["step"])

    ax2 = ax1.twinx()
    ax2.plot(per_step["step"], per_step["bleu"], color=color_right, marker="s", label="BLEU")
    ax2.set_ylabel("BLEU (%)", color=color_right)
    ax2.tick_params(axis="y", labelcolor=color_right)
    ax2.grid(False)

    ax1.set_title("ELBO and BLEU per refinement step")
    first, last = per_step.iloc[0], per_step.iloc[-1]
    caption = (
        f"Mean ELBO moves from {first['elbo']:.3f} at step 0 to {last['elbo']:.3f} at step "
        f"{int(last['step'])}; BLEU moves from {first['bleu']:.2f} to {last['bleu']:.2f}."
    )
    if "converged" in per_step:
        caption += f" {last['converged']:.1f}% of sentences had converged by the last step."
    return save_figure(fig, out_dir, "refinement_steps.png", caption)


def plot_tradeoff(tradeoff: pd.DataFrame, out_dir: Path) -> Path:
    """BLEU against speedup, one series with refinement and one without."""
    sns.set_style("whitegrid")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    sns.lineplot(data=tradeoff, x="speedup", y="bleu", hue="series", marker="o", sort=False, ax=ax)
    for _, row in tradeoff.iterrows():
        ax.annotate(f"N={int(row['N'])}", (row["speedup"], row["bleu"]),
                    textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("Speedup over teacher beam search (x)")
    ax.set_ylabel("BLEU (%)")
    ax.set_title("Quality / speed trade-off of latent search")

    best = tradeoff.loc[tradeoff["bleu"].idxmax()]
    caption = (
        f"Best BLEU {best['bleu']:.2f} ({best['series']}, N={int(best['N'])}) at "
        f"{best['speedup']:.2f}x the teacher's beam-search speed."
    )
    return save_figure(fig, out_dir, "tradeoff.png", caption)


def plot_training_curves(metrics: pd.DataFrame, out_dir: Path, filename: str = "training_curves.png") -> Path:
    """Per-token loss, raw KL and the KL budget against the training step."""
    sns.set_style("whitegrid")
    fig, (ax_loss, ax_kl) = plt.subplots(1, 2, figsize=(11, 4))
    ax_loss.plot(metrics["step"], metrics["loss"], linewidth=1.5)
    ax_loss.set_xlabel("Step")
    ax_loss.set_ylabel("Loss per target token")
    ax_loss.set_title("Training loss")

    if "kl_raw" in metrics:
        ax_kl.plot(metrics["step"], metrics["kl_raw"], label="KL (raw)", linewidth=1.5)
        ax_kl.plot(metrics["step"], metrics["kl_budgeted"], label="KL (budgeted)", linestyle="--")
        budget_ax = ax_kl.twinx()
        budget_ax.plot(metrics["step"], metrics["b"], color="tab:gray", alpha=0.6, label="budget b")
        budget_ax.set_ylabel("Budget b")
        budget_ax.grid(False)
        ax_kl.legend(loc="upper right")
    ax_kl.set_xlabel("Step")
    ax_kl.set_ylabel("KL per batch")
    ax_kl.set_title("KL divergence")

    last = metrics.iloc[-1]
    caption = f"Final logged step {int(last['step'])}: loss per token {last['loss']:.4f}."
    if "kl_raw" in metrics:
        caption += f" Raw KL {last['kl_raw']:.3f} with budget {last['b']:.3f}."
    return save_figure(fig, out_dir, filename, caption)
