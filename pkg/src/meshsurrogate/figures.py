"""Matplotlib renderings of the CSV reports, written next to them."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def error_over_time_figure(report, times, path) -> None:
    """Per-simulation error traces (transparent) with the mean on top."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for row in report.per_time:
        ax.plot(times, row, color="tab:blue", alpha=0.15, lw=0.8)
    ax.plot(times, report.per_time.mean(axis=0), color="tab:blue", lw=2,
            label=f"mean = {report.grand_mean:.4g}")
    ax.set_xlabel("time")
    ax.set_ylabel("mean node error")
    if report.model:
        ax.set_title(report.model)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def spectrum_figure(report, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    idx = np.arange(1, report.values.size + 1)
    ax.semilogy(idx, report.values, "o-", ms=3)
    ax.set_xlabel("singular value index")
    ax.set_ylabel("normalized singular value")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def training_history_figure(history, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = np.arange(len(history.total))
    ax.semilogy(epochs, history.total, label="total")
    ax.semilogy(epochs, history.approx, label="approximation")
    ax.semilogy(epochs, history.rec, label="reconstruction")
    ax.axvline(history.best_epoch, color="gray", ls="--", lw=0.8,
               label=f"best epoch {history.best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
