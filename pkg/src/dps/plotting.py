"""Report figures written straight to files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(report, path, title: str = "") -> Path:
    """Training loss, probe loss and validation AUC per epoch."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    if report.loss_history:
        ax1.plot(np.arange(1, len(report.loss_history) + 1), report.loss_history, "o-", label="train (batch mean)")
    if report.probe_loss:
        ax1.plot(np.arange(len(report.probe_loss)), report.probe_loss, "s--", label="probe set")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("cross-entropy")
    ax1.legend()
    if report.val_auc_history:
        ax2.plot(np.arange(1, len(report.val_auc_history) + 1), report.val_auc_history, "o-")
        if report.best_epoch >= 0:
            ax2.axvline(report.best_epoch + 1, color="grey", ls=":", label="best")
            ax2.legend()
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation AUC")
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_ablation(reports: dict, path, title: str = "Sampler ablation") -> Path:
    modes = list(reports)
    acc = [reports[m].accuracy for m in modes]
    auc = [reports[m].auc for m in modes]
    x = np.arange(len(modes))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(x - 0.2, acc, 0.4, label="accuracy")
    ax.bar(x + 0.2, auc, 0.4, label="AUC")
    ax.set_xticks(x, modes)
    lo = min(acc + auc)
    ax.set_ylim(max(0.0, lo - 0.1), 1.0)
    ax.legend()
    ax.set_title(title)
    return _save(fig, path)


def plot_sweep(rows: list[dict], path, metric: str = "auc") -> Path:
    if not rows:
        raise ValueError("nothing to plot: empty sweep")
    axis = rows[0]["axis"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([str(r["value"]) for r in rows], [r[metric] for r in rows], "o-")
    ax.set_xlabel(axis)
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} against {axis}")
    return _save(fig, path)


def plot_decay_rates(rates, path) -> Path:
    lam = np.asarray(rates.lam)[np.asarray(rates.fitted)]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if len(lam):
        ax.hist(np.log10(lam), bins=30)
    ax.set_xlabel("log10 decay rate")
    ax.set_ylabel("nodes")
    ax.set_title(f"Fitted decay rates ({len(lam)} nodes)")
    return _save(fig, path)


def plot_timeline(g, path, bins: int = 50) -> Path:
    """Interaction counts over (normalised) time."""
    fig, ax = plt.subplots(figsize=(6, 3))
    if g.num_edges:
        ax.hist(g.ts, bins=bins)
    ax.set_xlabel("time")
    ax.set_ylabel("interactions")
    return _save(fig, path)
