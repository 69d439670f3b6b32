"""Jacobian feature regression: ridge / Bayesian linear regression on Jacobian rows."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ..jacobians import Linearization
from .cg import conjugate_gradient_solve

MODES = ("residual", "raw")


@dataclass
class JfrPosterior:
    mean: np.ndarray
    cov: np.ndarray | None
    sigma2: float
    mode: str = "residual"


def regression_target(lin, y, mode="residual"):
    """Flattened regression target for a linearized rollout.

    ``residual`` subtracts the nominal simulation so the fit is a Taylor
    correction of the nominal model; ``raw`` regresses the data directly.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != lin.n_rows:
        raise ValueError("target length does not match the Jacobian rows")
    return y - lin.outputs() if mode == "residual" else y.copy()


def jfr_fit(J, y, sigma2, want_cov=False, mode="residual"):
    """Posterior of the linear correction from ``J`` and targets ``y``.

    Solves ``(J^T J + sigma2 I) theta = J^T y`` by Cholesky. The covariance is
    ``sigma2 (J^T J + sigma2 I)^-1``.
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    J = np.asarray(J, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != J.shape[0]:
        raise ValueError("y length must equal the number of Jacobian rows")
    A = J.T @ J
    A = 0.5 * (A + A.T)
    A[np.diag_indices_from(A)] += sigma2
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise linalg.LinAlgError("Cholesky factorization failed; non-finite Jacobian?") from exc
    mean = linalg.cho_solve(factor, J.T @ y)
    cov = None
    if want_cov:
        cov = sigma2 * linalg.cho_solve(factor, np.eye(A.shape[0]))
        cov = 0.5 * (cov + cov.T)
    return JfrPosterior(mean, cov, float(sigma2), mode)


def jfr_predict(model, theta_nl, posterior, u, x0=None, mode=None, want_var=False, lin=None):
    """Predictive mean (and optionally variance) of the adapted model.

    The mean is ``J_* theta_bar`` computed by a Jacobian-vector product, plus
    the nominal simulation in ``residual`` mode.
    """
    mode = mode or posterior.mode
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    lin = lin or Linearization(model, theta_nl, u, x0)
    mean = lin.jvp(posterior.mean)
    if mode == "residual":
        mean = mean + lin.outputs()
    var = None
    if want_var:
        if posterior.cov is None:
            raise ValueError("posterior has no covariance; refit with want_cov=True")
        J = lin.jacobian()
        var = np.einsum("ij,jk,ik->i", J, posterior.cov, J)
        var = np.maximum(var, 0.0)
    return mean, var


@dataclass
class LmJfrResult:
    mean: np.ndarray
    iterations: int
    converged: bool
    sigma2: float
    mode: str = "residual"

    def posterior(self):
        return JfrPosterior(self.mean, None, self.sigma2, self.mode)


def lm_jfr_fit(model, theta_nl, transfer, x0=None, sigma2=1e-2, max_iters=1000, tol=1e-8,
               mode="residual", lin=None):
    """Ridge solution via CG on the normal equations using only J v and J^T w.

    ``transfer`` is the prediction window (Sequence with outputs). Memory stays
    O(n_theta + N n_y) beyond the stored rollout.
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    lin = lin or Linearization(model, theta_nl, transfer.u, x0)
    target = regression_target(lin, transfer.y, mode)
    b = lin.vjp(target)

    def apply_A(v):
        return lin.vjp(lin.jvp(v)) + sigma2 * v

    theta, iters, ok = conjugate_gradient_solve(apply_A, b, tol=tol, max_iters=max_iters)
    if not ok:
        warnings.warn(f"LM-JFR did not converge in {max_iters} iterations", RuntimeWarning)
    return LmJfrResult(theta, iters, ok, float(sigma2), mode)
