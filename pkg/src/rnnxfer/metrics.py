"""Goodness-of-fit indices."""

from __future__ import annotations

import numpy as np


class UndefinedMetric(ValueError):
    pass


def r2_index(y, y_hat, per_channel=True):
    """Coefficient of determination ``1 - |y - y_hat|^2 / |y - mean(y)|^2``.

    ``y`` and ``y_hat`` are (N,) or (N, n_y). Returns one value per channel,
    or their average when ``per_channel`` is False.
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    if y.ndim == 1:
        y, y_hat = y[:, None], y_hat[:, None]
    if y.ndim != 2 or y.shape[0] < 2:
        raise ValueError("expected (N, n_y) arrays with N >= 2")
    sst = np.sum((y - y.mean(axis=0)) ** 2, axis=0)
    if np.any(sst == 0):
        raise UndefinedMetric("R2 is undefined for a constant output channel")
    r2 = 1.0 - np.sum((y - y_hat) ** 2, axis=0) / sst
    return r2 if per_channel else float(r2.mean())
