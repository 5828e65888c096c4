"""Optional figures; every function writes a PNG and returns its path."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_round_mse(round_mse, path, baseline=None, window=50):
    """Running mean of per-round MSE, optionally against a baseline trace."""
    fig, ax = plt.subplots(figsize=(7, 3.5))

    def smooth(v):
        v = np.asarray(v, dtype=float)
        if len(v) < window:
            return v
        return np.convolve(v, np.ones(window) / window, mode="valid")

    ax.plot(smooth(round_mse), label="model")
    if baseline is not None:
        ax.plot(smooth(baseline), label="persistence", alpha=0.7)
    ax.set_xlabel("round")
    ax.set_ylabel(f"MSE (moving mean, {window})")
    ax.legend()
    return _save(fig, path)


def plot_gradient_trace(trace, path, t_star=None):
    trace = np.asarray(trace, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(len(trace)), trace, marker="o", ms=3)
    if t_star is not None:
        ax.axvline(t_star, color="r", ls="--", label="intervention")
        ax.legend()
    ax.set_yscale("symlog", linthresh=max(float(np.abs(trace).max()) * 1e-6, 1e-30))
    ax.set_xlabel("window step t")
    ax.set_ylabel("L1 |d eps_H / d z_t|")
    return _save(fig, path)


def plot_ablation(results, path):
    """``results``: mapping variant name -> cumulative MSE."""
    names = list(results)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, [results[n] for n in names], color="tab:blue")
    ax.set_ylabel("cumulative MSE")
    return _save(fig, path)
