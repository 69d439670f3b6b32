"""Parameter Jacobians of a simulated recurrent model.

The full Jacobian ``J = d y_hat / d theta`` of a rollout has one row per
(time step, output channel), time-major: row ``k * n_y + j``. It is built
either by propagating state sensitivities forward alongside the rollout or,
for reference, by one reverse sweep per output time step. ``jvp`` and ``vjp``
apply ``J`` and ``J^T`` without materializing it.

Derivatives are taken on the augmented state ``z = (x, y_prev)`` so that
predicted outputs fed back into the cell are differentiated through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DivergenceError, StateVector, rollout


@dataclass
class StepJacobians:
    jfx: np.ndarray  # n_z x n_z
    jftheta: np.ndarray  # n_z x n_theta
    jgx: np.ndarray  # n_y x n_z
    jgtheta: np.ndarray  # n_y x n_theta


def _cell_step_jacobians(model, p, cache):
    """Jacobians of F and G of the bare cell by n_x + n_y reverse passes."""
    arch = model.arch
    n_x, n_y = arch.n_x, arch.n_y
    m = n_x + n_y
    gx_next = np.zeros((m, n_x))
    gx_next[:n_x] = np.eye(n_x)
    gy = np.zeros((m, n_y))
    gy[n_x:] = np.eye(n_y)
    gx, gv, grads = model.cell.backward(p, cache, gx_next, gy, per_sample=True)
    gtheta = model.flat_grads(grads)
    return gx, gv, gtheta


def _augment(model, gx, gv, gtheta, measured_feedback):
    arch = model.arch
    n_x, n_u = arch.n_x, arch.n_u
    Fx, Gx = gx[:n_x], gx[n_x:]
    Ftheta, Gtheta = gtheta[:n_x], gtheta[n_x:]
    if not arch.output_feedback:
        return StepJacobians(Fx, Ftheta, Gx, Gtheta)
    n_z = arch.n_z
    jfx = np.zeros((n_z, n_z))
    jfx[:n_x, :n_x] = Fx
    jfx[:n_x, n_x:] = gv[:n_x, n_u:]
    jftheta = np.zeros((n_z, gtheta.shape[1]))
    jftheta[:n_x] = Ftheta
    if not measured_feedback:
        jfx[n_x:, :n_x] = Gx
        jftheta[n_x:] = Gtheta
    jgx = np.zeros((arch.n_y, n_z))
    jgx[:, :n_x] = Gx
    return StepJacobians(jfx, jftheta, jgx, Gtheta)


def step_jacobians(model, state, u_k, theta, measured_feedback=False):
    """Jacobians of the augmented one-step map at ``(state, u_k)``.

    With ``measured_feedback`` the next fed-back value is a measurement, so the
    feedback rows of ``jfx`` and ``jftheta`` are zero.
    """
    arch = model.arch
    z = state.augmented()
    u_k = np.atleast_1d(np.asarray(u_k, dtype=float))
    if z.shape != (arch.n_z,) or u_k.shape != (arch.n_u,):
        raise ValueError("state or input dimension does not match the architecture")
    x = z[None, : arch.n_x]
    v = np.concatenate([u_k, z[arch.n_x :]])[None]
    p = model.views(theta)
    _, _, cache = model.cell.forward(p, x, v)
    return _augment(model, *_cell_step_jacobians(model, p, cache), measured_feedback)


class Linearization:
    """Rollout of a model stored for repeated derivative evaluations.

    The forward pass is run once; ``jvp``, ``vjp`` and the Jacobian builders
    reuse its caches. The rollout is closed-loop from ``x0`` with zero initial
    sensitivity.
    """

    def __init__(self, model, theta, u_seq, x0=None):
        self.model = model
        self.arch = model.arch
        self.theta = theta
        self.p = model.views(theta)
        u = np.atleast_2d(np.asarray(u_seq, dtype=float).T).T
        if u.shape[1] != self.arch.n_u:
            raise ValueError("input dimension does not match the architecture")
        self.u = u
        self.x0 = x0 if x0 is not None else StateVector.zeros(self.arch)
        y, z, caches = rollout(model, theta, u[None], self.x0.augmented()[None], keep_cache=True)
        self.y = y[0]
        self.z = z[0]
        self.caches = caches
        self.N = u.shape[0]
        self.n_theta = model.n_theta

    @property
    def n_rows(self):
        return self.N * self.arch.n_y

    def outputs(self):
        """Nominal outputs flattened time-major."""
        return self.y.reshape(-1)

    def step_jacobians(self, k):
        return _augment(self.model, *_cell_step_jacobians(self.model, self.p, self.caches[k]), False)

    def iter_rows(self):
        """Yield the (n_y, n_theta) Jacobian block of each step, propagating sensitivities."""
        arch = self.arch
        n_x = arch.n_x
        fb = arch.output_feedback
        s = np.zeros((arch.n_z, self.n_theta))
        for k in range(self.N):
            gx, gv, gtheta = _cell_step_jacobians(self.model, self.p, self.caches[k])
            # y_k = G(x_k) only sees the x block of the sensitivity
            row = gx[n_x:] @ s[:n_x] + gtheta[n_x:]
            if not np.all(np.isfinite(row)):
                raise DivergenceError(k, f"sensitivity diverged at step {k}")
            s_next = np.empty_like(s)
            s_next[:n_x] = gx[:n_x] @ s[:n_x] + gtheta[:n_x]
            if fb:
                s_next[:n_x] += gv[:n_x, arch.n_u :] @ s[n_x:]
                s_next[n_x:] = row
            s = s_next
            yield row

    def jacobian(self):
        """Full Jacobian by the forward sensitivity recursion."""
        J = np.empty((self.N, self.arch.n_y, self.n_theta))
        for k, row in enumerate(self.iter_rows()):
            J[k] = row
        return J.reshape(self.n_rows, self.n_theta)

    def _backward_step(self, k, lam, w_k, per_sample=False):
        """Adjoint step at time k: returns (lam_k, parameter gradient blocks)."""
        arch = self.arch
        n_x = arch.n_x
        gy = w_k
        if arch.output_feedback:
            gy = gy + lam[:, n_x:]
        gx, gv, grads = self.model.cell.backward(
            self.p, self.caches[k], lam[:, :n_x], gy, per_sample=per_sample
        )
        if arch.output_feedback:
            gx = np.concatenate([gx, gv[:, arch.n_u :]], axis=1)
        return gx, grads

    def jacobian_naive(self):
        """Full Jacobian with one reverse sweep per output time step (O(N^2 n_theta))."""
        arch = self.arch
        n_y = arch.n_y
        J = np.zeros((self.N, n_y, self.n_theta))
        eye = np.eye(n_y)
        for k in range(self.N):
            lam = np.zeros((n_y, arch.n_z))
            w = eye
            acc = None
            for j in range(k, -1, -1):
                lam, grads = self._backward_step(j, lam, w, per_sample=True)
                acc = grads if acc is None else {n: acc[n] + grads[n] for n in acc}
                w = np.zeros((n_y, n_y))
            J[k] = self.model.flat_grads(acc)
        return J.reshape(self.N * n_y, self.n_theta)

    def jvp(self, v):
        """``J @ v`` via the directional sensitivity recursion."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_theta,):
            raise ValueError(f"expected a vector of length {self.n_theta}")
        arch = self.arch
        n_x = arch.n_x
        dp = self.model.views(v)
        out = np.empty((self.N, arch.n_y))
        dz = np.zeros((1, arch.n_z))
        du = np.zeros((1, arch.n_u))
        for k in range(self.N):
            dv = np.concatenate([du, dz[:, n_x:]], axis=1) if arch.output_feedback else du
            dx_next, dy = self.model.cell.tangent(self.p, self.caches[k], dz[:, :n_x], dv, dp)
            out[k] = dy[0]
            dz = np.concatenate([dx_next, dy], axis=1) if arch.output_feedback else dx_next
        return out.reshape(-1)

    def vjp(self, w):
        """``J^T @ w`` via one reverse adjoint sweep."""
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_rows,):
            raise ValueError(f"expected a vector of length {self.n_rows}")
        W = w.reshape(1, self.N, self.arch.n_y)
        return adjoint_sweep(self.model, self.p, self.caches, W)


def adjoint_sweep(model, p, caches, W, n_ctx=0):
    """Gradient of ``sum_k <W_k, y_k>`` w.r.t. theta for a batched rollout.

    ``W`` is (B, N, n_y). During the first ``n_ctx`` steps the fed-back value
    is a measurement, so no adjoint flows from it into the predicted output.
    Per-window gradients are summed.
    """
    arch = model.arch
    n_x, n_u = arch.n_x, arch.n_u
    fb = arch.output_feedback
    B, N, _ = W.shape
    lam = np.zeros((B, arch.n_z))
    acc = None
    for k in range(N - 1, -1, -1):
        gy = W[:, k]
        if fb and k >= n_ctx:
            gy = gy + lam[:, n_x:]
        gx, gv, grads = model.cell.backward(p, caches[k], lam[:, :n_x], gy)
        lam = np.concatenate([gx, gv[:, n_u:]], axis=1) if fb else gx
        if acc is None:
            acc = grads
        else:
            for name in acc:
                acc[name] += grads[name]
    return model.flat_grads(acc)


def full_jacobian_recursive(model, u_seq, x0, theta):
    return Linearization(model, theta, u_seq, x0).jacobian()


def full_jacobian_naive(model, u_seq, x0, theta):
    return Linearization(model, theta, u_seq, x0).jacobian_naive()


def jvp(model, u_seq, x0, theta, v):
    return Linearization(model, theta, u_seq, x0).jvp(v)


def vjp(model, u_seq, x0, theta, w):
    return Linearization(model, theta, u_seq, x0).vjp(w)


def finite_diff_jacobian(model, u_seq, x0, theta, h=1e-5):
    """Central-difference Jacobian, column by column. Test oracle only.

    The step for parameter ``i`` is ``h * max(1, |theta_i|)``.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    values = theta.values if hasattr(theta, "values") else np.asarray(theta, dtype=float)
    u = np.atleast_2d(np.asarray(u_seq, dtype=float).T).T
    x0 = x0 if x0 is not None else StateVector.zeros(model.arch)
    z0 = x0.augmented()[None]
    cols = []
    for i in range(values.size):
        step = h * max(1.0, abs(values[i]))
        tp = values.copy()
        tp[i] += step
        tm = values.copy()
        tm[i] -= step
        yp = rollout(model, tp, u[None], z0, guard=False)[0][0].reshape(-1)
        ym = rollout(model, tm, u[None], z0, guard=False)[0][0].reshape(-1)
        cols.append((yp - ym) / (2.0 * step))
    return np.stack(cols, axis=1)
