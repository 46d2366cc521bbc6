"""Figure rendering for the report path.

Every function draws one figure and writes it to a PNG next to the
delimited output it illustrates.  Plots are cosmetic: the CSV files are the
source of truth and none of the numeric outputs depend on this module.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_LOSS_CURVES = ("pred", "dict", "eig", "eig_pred")


def plot_loss_curves(history, path):
    """Per-epoch batch-mean loss curves on a log scale."""
    means = history.epoch_means()
    epochs = np.arange(1, len(means) + 1)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for name in _LOSS_CURVES:
        vals = np.array([getattr(m, name) for m in means])
        if np.all(np.isnan(vals)):
            continue
        ax.semilogy(epochs, vals, marker="o", markersize=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (per snapshot)")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_spectrum(eigenvalues, path, residual_values=None, true_eigenvalues=None):
    """Eigenvalues in the complex plane with the unit circle; points are
    colored by residual when provided, true values overlaid as crosses."""
    fig, ax = plt.subplots(figsize=(5.2, 5.0))
    th = np.linspace(0, 2 * np.pi, 256)
    ax.plot(np.cos(th), np.sin(th), "k--", linewidth=0.8, alpha=0.6)
    if residual_values is not None:
        sc = ax.scatter(eigenvalues.real, eigenvalues.imag, c=residual_values,
                        cmap="viridis", s=24, zorder=3)
        fig.colorbar(sc, ax=ax, label="residual")
    else:
        ax.scatter(eigenvalues.real, eigenvalues.imag, s=24, zorder=3)
    if true_eigenvalues is not None:
        ax.scatter(true_eigenvalues.real, true_eigenvalues.imag, marker="x",
                   color="red", s=40, zorder=4, label="true")
        ax.legend()
    ax.set_xlabel("Re")
    ax.set_ylabel("Im")
    ax.set_aspect("equal")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_phase_portraits(pairs, path):
    """Predicted vs true planar trajectories side by side.

    ``pairs`` is a list of (predicted, true) arrays of shape (steps, 2).
    """
    fig, axes = plt.subplots(1, 2, figsize=(9.2, 4.4), sharex=True, sharey=True)
    for pred, true in pairs:
        if pred.size:
            axes[0].plot(pred[:, 0], pred[:, 1], linewidth=0.8)
        if true is not None and true.size:
            axes[1].plot(true[:, 0], true[:, 1], linewidth=0.8)
    axes[0].set_title("predicted")
    axes[1].set_title("true")
    for ax in axes:
        ax.set_xlabel("x1")
        ax.grid(True, alpha=0.3)
    axes[0].set_ylabel("x2")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_field_heatmaps(pred, true, dt, path):
    """Space-time heatmaps of one predicted and one true field trajectory."""
    fig, axes = plt.subplots(1, 2, figsize=(9.6, 3.6), sharey=True)
    extent = [0, max(pred.shape[0], true.shape[0]) * dt, 0, 2 * np.pi]
    vmax = np.nanmax(np.abs(true)) if true.size else np.nanmax(np.abs(pred))
    for ax, u, title in ((axes[0], pred, "predicted"), (axes[1], true, "true")):
        if u.size:
            ax.imshow(u.T, origin="lower", aspect="auto", cmap="RdBu_r",
                      vmin=-vmax, vmax=vmax,
                      extent=[0, u.shape[0] * dt, 0, 2 * np.pi])
        ax.set_title(title)
        ax.set_xlabel("t")
        ax.set_xlim(extent[0], extent[1])
    axes[0].set_ylabel("x")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_scalar_trajectories(pairs, dt, path):
    """Predicted vs true scalar state over time, one panel per trajectory."""
    n = len(pairs)
    fig, axes = plt.subplots(n, 1, figsize=(7.0, 1.8 * n), sharex=True, squeeze=False)
    for ax, (pred, true) in zip(axes[:, 0], pairs):
        if true is not None and true.size:
            ax.plot(dt * np.arange(1, true.shape[0] + 1), true[:, 0], "k-", label="true")
        if pred.size:
            ax.plot(dt * np.arange(1, pred.shape[0] + 1), pred[:, 0], "C0--", label="predicted")
        ax.grid(True, alpha=0.3)
    axes[0, 0].legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
