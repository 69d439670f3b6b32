"""Joint state-parameter extended Kalman filter, used as an adaptation baseline."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..jacobians import _augment, _cell_step_jacobians
from ..model import StateVector, simulate


@dataclass
class EkfState:
    z: np.ndarray  # augmented model state
    theta: np.ndarray
    P: np.ndarray  # joint covariance over (z, theta)
    Q: np.ndarray  # process-noise diagonal
    R: np.ndarray  # measurement-noise diagonal


@dataclass
class EkfResult:
    theta: np.ndarray
    theta_traj: np.ndarray
    y_filter: np.ndarray  # one-step predictions during filtering
    y_hat: np.ndarray  # closed-loop rerun with the final parameters
    floored: int  # number of covariance repairs


def _repair(P):
    """Symmetrize and clip negative eigenvalues; exact zeros (frozen entries) survive."""
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    return (V * np.maximum(w, 0.0)) @ V.T


def _forward(model, p, z, u_k):
    arch = model.arch
    x = z[None, : arch.n_x]
    v = np.concatenate([u_k, z[arch.n_x :]])[None] if arch.output_feedback else u_k[None]
    x_next, y, cache = model.cell.forward(p, x, v)
    return x_next[0], y[0], cache


def ekf_adapt(model, theta_nl, stream, q_x=1e-6, q_theta=1e-8, r=1e-2, p0_x=1e-4, p0_theta=1e-4,
              x0=None, check_every=50):
    """Filter ``stream`` with the augmented state (z, theta) under random-walk parameters.

    Scalars or per-entry arrays are accepted for the noise and prior settings.
    Returns the parameter trajectory and a closed-loop rerun with the final
    estimate from ``x0``.
    """
    arch = model.arch
    n_z, n_t = arch.n_z, model.n_theta
    n = n_z + n_t
    theta = np.array(theta_nl.values if hasattr(theta_nl, "values") else theta_nl, dtype=float)
    x0 = x0 if x0 is not None else StateVector.zeros(arch)
    z = x0.augmented().copy()
    Q = np.concatenate([np.broadcast_to(q_x, n_z), np.broadcast_to(q_theta, n_t)]).astype(float)
    R = np.broadcast_to(np.asarray(r, dtype=float), (arch.n_y,)).copy()
    if np.any(R <= 0):
        raise ValueError("measurement noise must be positive")
    P = np.diag(np.concatenate([np.broadcast_to(p0_x, n_z), np.broadcast_to(p0_theta, n_t)]).astype(float))
    u = stream.u
    y = stream.y
    N = len(stream)
    traj = np.empty((N, n_t))
    y_filter = np.empty((N, arch.n_y))
    floored = 0
    for k in range(N):
        p = model.views(theta)
        _, y_pred, cache = _forward(model, p, z, u[k])
        jac = _augment(model, *_cell_step_jacobians(model, p, cache), False)
        y_filter[k] = y_pred
        H = np.concatenate([jac.jgx, jac.jgtheta], axis=1)
        PHt = P @ H.T
        S = H @ PHt + np.diag(R)
        K = np.linalg.solve(S, PHt.T).T
        delta = K @ (y[k] - y_pred)
        z = z + delta[:n_z]
        theta = theta + delta[n_z:]
        P = P - K @ S @ K.T
        # time update at the corrected estimate
        p = model.views(theta)
        x_next, y_now, cache = _forward(model, p, z, u[k])
        jac = _augment(model, *_cell_step_jacobians(model, p, cache), False)
        A, Bt = jac.jfx, jac.jftheta
        Pzz, Pzt, Ptt = P[:n_z, :n_z], P[:n_z, n_z:], P[n_z:, n_z:]
        BPtt = Bt @ Ptt
        new_zt = A @ Pzt + BPtt
        AzPt = A @ Pzt @ Bt.T
        new_zz = A @ Pzz @ A.T + AzPt + AzPt.T + BPtt @ Bt.T
        P = np.block([[new_zz, new_zt], [new_zt.T, Ptt]])
        P[np.diag_indices(n)] += Q
        z = np.concatenate([x_next, y_now]) if arch.output_feedback else x_next
        traj[k] = theta
        bad = np.any(np.diag(P) < 0) or not np.all(np.isfinite(P))
        if not bad and check_every and k % check_every == 0:
            # semidefinite is fine (zero prior on some entries); only negative directions need repair
            w = np.linalg.eigvalsh(0.5 * (P + P.T))
            bad = w[0] < -1e-12 * max(w[-1], 1e-300)
        if bad:
            P = _repair(P)
            floored += 1
    if floored:
        warnings.warn(f"EKF covariance repaired {floored} times", RuntimeWarning)
    y_hat, _ = simulate(model, u, x0, theta)
    return EkfResult(theta, traj, y_filter, y_hat, floored)
