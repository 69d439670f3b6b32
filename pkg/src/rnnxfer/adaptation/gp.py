"""Function-space view: Gaussian process with the recurrent tangent kernel J J^T."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ..jacobians import Linearization
from .cg import conjugate_gradient_solve
from .jfr import MODES, regression_target

EXPLICIT_LIMIT = 50_000_000


@dataclass
class GramCache:
    K: np.ndarray
    lin: Linearization
    J: np.ndarray | None = None


def ntk_gram(model, theta_nl, u_xf, x0=None, max_entries=EXPLICIT_LIMIT, lin=None):
    """Kernel matrix ``K = J_xf J_xf^T`` over the transfer rows.

    Built from the explicit Jacobian when it fits in ``max_entries``,
    otherwise column by column as ``J (J^T e_i)``.
    """
    lin = lin or Linearization(model, theta_nl, u_xf, x0)
    n = lin.n_rows
    if n * lin.n_theta <= max_entries:
        J = lin.jacobian()
        K = J @ J.T
        return GramCache(0.5 * (K + K.T), lin, J)
    K = np.empty((n, n))
    e = np.zeros(n)
    for i in range(n):
        e[i] = 1.0
        K[:, i] = lin.jvp(lin.vjp(e))
        e[i] = 0.0
    return GramCache(0.5 * (K + K.T), lin, None)


@dataclass
class GpPrediction:
    mean: np.ndarray
    var: np.ndarray | None
    alpha: np.ndarray
    iterations: int
    converged: bool


def gp_predict(model, theta_nl, gram, y_xf, sigma2, u, x0=None, mode="residual", tol=1e-8,
               max_iters=None, want_var=False, solver="cg", lin=None):
    """Posterior predictive mean ``J_* J_xf^T (K + sigma2 I)^-1 y`` and variance.

    ``alpha`` solves ``(K + sigma2 I) alpha = y`` by conjugate gradient (or a
    Cholesky solve with ``solver="direct"``). The mean is then evaluated
    matrix-free as a Jacobian-vector product of ``J_xf^T alpha``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    target = regression_target(gram.lin, y_xf, mode)
    n = target.size
    Ks = gram.K.copy()
    Ks[np.diag_indices(n)] += sigma2
    if solver == "direct":
        alpha = linalg.cho_solve(linalg.cho_factor(Ks, lower=True), target)
        iters, ok = 0, True
    else:
        max_iters = 10 * n if max_iters is None else max_iters
        alpha, iters, ok = conjugate_gradient_solve(lambda v: Ks @ v, target, tol, max_iters)
        if not ok:
            warnings.warn(f"GP conjugate gradient stopped after {iters} iterations", RuntimeWarning)
    lin = lin or Linearization(model, theta_nl, u, x0)
    mean = lin.jvp(gram.lin.vjp(alpha))
    if mode == "residual":
        mean = mean + lin.outputs()
    var = None
    if want_var:
        J_xf = gram.J if gram.J is not None else gram.lin.jacobian()
        J_s = lin.jacobian()
        K_sx = J_s @ J_xf.T
        factor = linalg.cho_factor(Ks, lower=True)
        var = np.einsum("ij,ij->i", J_s, J_s) - np.einsum("ij,ji->i", K_sx, linalg.cho_solve(factor, K_sx.T))
        var = np.maximum(var, 0.0)
    return GpPrediction(mean, var, alpha, iters, ok)
