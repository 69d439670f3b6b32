"""Figures of predicted versus measured outputs, rendered to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_predictions(path, t, y, predictions, title="", channel_names=None):
    """One panel per output channel; ``predictions`` maps method name to (N, n_y) arrays."""
    y = np.atleast_2d(np.asarray(y, dtype=float).T).T
    n_y = y.shape[1]
    names = channel_names or [f"y{j}" for j in range(n_y)]
    fig, axes = plt.subplots(n_y, 1, figsize=(9, 2.6 * n_y), sharex=True, squeeze=False)
    for j, ax in enumerate(axes[:, 0]):
        ax.plot(t, y[:, j], color="k", lw=1.2, label="measured")
        for method, y_hat in predictions.items():
            y_hat = np.atleast_2d(np.asarray(y_hat, dtype=float).T).T
            ax.plot(t, y_hat[:, j], lw=0.9, label=method)
        ax.set_ylabel(names[j])
        ax.grid(alpha=0.3)
    axes[0, 0].legend(loc="upper right", fontsize="small", ncol=min(4, len(predictions) + 1))
    axes[-1, 0].set_xlabel("time (s)")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
