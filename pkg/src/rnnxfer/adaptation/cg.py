"""Conjugate gradient for symmetric positive definite operators."""

from __future__ import annotations

import numpy as np


def conjugate_gradient_solve(apply_A, b, tol=1e-8, max_iters=None, x0=None):
    """Solve ``A x = b`` given only ``apply_A(v) = A v``.

    Stops when ``|r| <= tol * |b|``. Returns ``(x, iters, converged)``; on
    non-convergence the iterate with the smallest residual is returned.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    max_iters = 10 * n if max_iters is None else max_iters
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0 and x0 is None:
        return x, 0, True
    r = b - apply_A(x) if x0 is not None else b.copy()
    rr = r @ r
    threshold = (tol * b_norm) ** 2
    if rr <= threshold:
        return x, 0, True
    p = r.copy()
    best_x, best_rr = x.copy(), rr
    it = 0
    for it in range(1, max_iters + 1):
        Ap = apply_A(p)
        pAp = p @ Ap
        if pAp <= 0:
            # operator is not positive definite along p; keep the best iterate
            break
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = r @ r
        if rr_new < best_rr:
            best_x, best_rr = x.copy(), rr_new
        if rr_new <= threshold:
            return x, it, True
        p = r + (rr_new / rr) * p
        rr = rr_new
    return best_x, it, False
