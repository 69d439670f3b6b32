"""Recursive least squares on Jacobian features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RlsState:
    theta: np.ndarray
    P: np.ndarray
    sigma2: float

    @classmethod
    def initial(cls, n_theta, sigma2):
        """Zero mean, identity covariance: the prior of the correction term."""
        if not sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        return cls(np.zeros(n_theta), np.eye(n_theta), float(sigma2))


def rls_update(state, row, y_k):
    """One RLS step with regressor ``row`` and scalar measurement ``y_k``."""
    row = np.asarray(row, dtype=float)
    if not np.all(np.isfinite(row)):
        raise ValueError("non-finite regressor")
    Pr = state.P @ row
    denom = state.sigma2 + row @ Pr
    gain = Pr / denom
    theta = state.theta + gain * (y_k - row @ state.theta)
    P = state.P - np.outer(gain, Pr)
    return RlsState(theta, 0.5 * (P + P.T), state.sigma2)


def rls_fit(rows, targets, sigma2, state=None):
    """Process rows one by one; equivalent to the batch ridge fit after a full pass."""
    rows = np.asarray(rows, dtype=float)
    state = state or RlsState.initial(rows.shape[1], sigma2)
    for row, y in zip(rows, np.asarray(targets, dtype=float).reshape(-1)):
        state = rls_update(state, row, y)
    return state


def rls_stream(lin, targets, sigma2):
    """Online fit: Jacobian rows come from the sensitivity recursion as the rollout advances."""
    targets = np.asarray(targets, dtype=float).reshape(lin.N, -1)
    state = RlsState.initial(lin.n_theta, sigma2)
    for k, rows in enumerate(lin.iter_rows()):
        for j, row in enumerate(rows):
            state = rls_update(state, row, targets[k, j])
    return state
