"""Recurrent cell primitives with hand-written forward, reverse and tangent passes.

Every cell maps a state ``x`` and a cell input ``v`` to the next state and the
current output::

    x_next = F(x, v; theta)
    y      = G(x; theta)

``v`` is the exogenous input ``u``, optionally followed by the fed-back output.
All passes are batched over a leading axis. Cached arrays may carry a batch of
one while cotangents carry a larger batch; broadcasting handles both.
"""

from __future__ import annotations

import numpy as np


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _outer(g, a, per_sample):
    """Weight gradient ``g^T a`` or its per-sample version ``g_b a_b^T``."""
    if per_sample:
        a = np.broadcast_to(a, (g.shape[0], a.shape[1]))
        return np.einsum("bi,bj->bij", g, a)
    if a.shape[0] != g.shape[0]:
        a = np.broadcast_to(a, (g.shape[0], a.shape[1]))
    return g.T @ a


def _colsum(g, per_sample):
    return g if per_sample else g.sum(axis=0)


class Cell:
    """Base class. Subclasses define ``param_shapes`` and the three passes."""

    kind = "base"

    def __init__(self, n_x, n_in, n_y):
        self.n_x = n_x
        self.n_in = n_in
        self.n_y = n_y

    def param_shapes(self):
        raise NotImplementedError

    def init_values(self, rng):
        raise NotImplementedError

    def forward(self, p, x, v):
        """Return ``(x_next, y, cache)``."""
        raise NotImplementedError

    def backward(self, p, cache, gx_next, gy, per_sample=False):
        """Return ``(gx, gv, grads)`` where grads maps parameter names to arrays."""
        raise NotImplementedError

    def tangent(self, p, cache, dx, dv, dp):
        """Return ``(dx_next, dy)`` for the directional perturbation."""
        raise NotImplementedError


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class LinearCell(Cell):
    """``x_next = A x + B v``, ``y = x[:n_y]``. Used as an analytic test model."""

    kind = "linear"

    def param_shapes(self):
        return [("A", (self.n_x, self.n_x)), ("B", (self.n_x, self.n_in))]

    def init_values(self, rng):
        fan = self.n_x + self.n_in
        return {
            "A": _uniform(rng, (self.n_x, self.n_x), fan),
            "B": _uniform(rng, (self.n_x, self.n_in), fan),
        }

    def forward(self, p, x, v):
        x_next = x @ p["A"].T + v @ p["B"].T
        y = x[:, : self.n_y]
        return x_next, y, (x, v)

    def backward(self, p, cache, gx_next, gy, per_sample=False):
        x, v = cache
        gx = gx_next @ p["A"]
        gx[:, : self.n_y] += gy
        gv = gx_next @ p["B"]
        grads = {"A": _outer(gx_next, x, per_sample), "B": _outer(gx_next, v, per_sample)}
        return gx, gv, grads

    def tangent(self, p, cache, dx, dv, dp):
        x, v = cache
        dx_next = dx @ p["A"].T + dv @ p["B"].T + x @ dp["A"].T + v @ dp["B"].T
        return dx_next, dx[:, : self.n_y]


class MlpCell(Cell):
    """State-space MLP: one tanh hidden layer, linear output of size ``n_x``.

    With ``residual=True`` the update is ``x + MLP(x, v)``, i.e. a forward-Euler
    step of a neural ODE with the sample time absorbed into the output layer.
    The readout is either a fixed selector of the first ``n_y`` states or a
    learned affine map.
    """

    kind = "mlp_ss"

    def __init__(self, n_x, n_in, n_y, hidden, residual=True, readout="linear"):
        super().__init__(n_x, n_in, n_y)
        if readout not in ("linear", "selector"):
            raise ValueError(f"unknown readout {readout!r}")
        if readout == "selector" and n_y > n_x:
            raise ValueError("selector readout needs n_y <= n_x")
        self.hidden = hidden
        self.residual = residual
        self.readout = readout

    def param_shapes(self):
        n_a = self.n_x + self.n_in
        shapes = [
            ("W1", (self.hidden, n_a)),
            ("b1", (self.hidden,)),
            ("W2", (self.n_x, self.hidden)),
            ("b2", (self.n_x,)),
        ]
        if self.readout == "linear":
            shapes += [("C", (self.n_y, self.n_x)), ("c", (self.n_y,))]
        return shapes

    def init_values(self, rng):
        n_a = self.n_x + self.n_in
        vals = {
            "W1": _uniform(rng, (self.hidden, n_a), n_a),
            "b1": np.zeros(self.hidden),
            "W2": _uniform(rng, (self.n_x, self.hidden), self.hidden),
            "b2": np.zeros(self.n_x),
        }
        if self.readout == "linear":
            vals["C"] = _uniform(rng, (self.n_y, self.n_x), self.n_x)
            vals["c"] = np.zeros(self.n_y)
        return vals

    def _readout(self, p, x):
        if self.readout == "selector":
            return x[:, : self.n_y]
        return x @ p["C"].T + p["c"]

    def forward(self, p, x, v):
        a = np.concatenate([x, v], axis=1)
        h = np.tanh(a @ p["W1"].T + p["b1"])
        x_next = h @ p["W2"].T + p["b2"]
        if self.residual:
            x_next = x_next + x
        return x_next, self._readout(p, x), (x, a, h)

    def backward(self, p, cache, gx_next, gy, per_sample=False):
        x, a, h = cache
        grads = {
            "W2": _outer(gx_next, h, per_sample),
            "b2": _colsum(gx_next, per_sample),
        }
        gpre = (gx_next @ p["W2"]) * (1.0 - h * h)
        grads["W1"] = _outer(gpre, a, per_sample)
        grads["b1"] = _colsum(gpre, per_sample)
        ga = gpre @ p["W1"]
        gx = ga[:, : self.n_x]
        if self.residual:
            gx = gx + gx_next
        if self.readout == "selector":
            gx = gx.copy()
            gx[:, : self.n_y] += gy
        else:
            gx = gx + gy @ p["C"]
            grads["C"] = _outer(gy, x, per_sample)
            grads["c"] = _colsum(gy, per_sample)
        return gx, ga[:, self.n_x :], grads

    def tangent(self, p, cache, dx, dv, dp):
        x, a, h = cache
        da = np.concatenate([dx, dv], axis=1)
        dpre = da @ p["W1"].T + a @ dp["W1"].T + dp["b1"]
        dh = (1.0 - h * h) * dpre
        dx_next = dh @ p["W2"].T + h @ dp["W2"].T + dp["b2"]
        if self.residual:
            dx_next = dx_next + dx
        if self.readout == "selector":
            dy = dx[:, : self.n_y]
        else:
            dy = dx @ p["C"].T + x @ dp["C"].T + dp["c"]
        return dx_next, dy


class LstmCell(Cell):
    """Single-layer LSTM with a linear readout of the hidden state.

    The state stacks ``h`` then ``c``. Gate rows of ``W`` and ``b`` are ordered
    input, forget, cell candidate, output; ``W`` acts on ``[v, h]``.
    """

    kind = "lstm"

    def __init__(self, n_in, n_y, hidden):
        super().__init__(2 * hidden, n_in, n_y)
        self.hidden = hidden

    def param_shapes(self):
        H = self.hidden
        return [
            ("W", (4 * H, self.n_in + H)),
            ("b", (4 * H,)),
            ("Wy", (self.n_y, H)),
            ("by", (self.n_y,)),
        ]

    def init_values(self, rng):
        H = self.hidden
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0
        return {
            "W": _uniform(rng, (4 * H, self.n_in + H), self.n_in + H),
            "b": b,
            "Wy": _uniform(rng, (self.n_y, H), H),
            "by": np.zeros(self.n_y),
        }

    def forward(self, p, x, v):
        H = self.hidden
        h, c = x[:, :H], x[:, H:]
        a = np.concatenate([v, h], axis=1)
        pre = a @ p["W"].T + p["b"]
        i = _sigmoid(pre[:, :H])
        f = _sigmoid(pre[:, H : 2 * H])
        g = np.tanh(pre[:, 2 * H : 3 * H])
        o = _sigmoid(pre[:, 3 * H :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        y = h @ p["Wy"].T + p["by"]
        return np.concatenate([h_new, c_new], axis=1), y, (h, c, a, i, f, g, o, tc)

    def backward(self, p, cache, gx_next, gy, per_sample=False):
        H = self.hidden
        h, c, a, i, f, g, o, tc = cache
        gh_new, gc_new = gx_next[:, :H], gx_next[:, H:]
        gc_tot = gc_new + gh_new * o * (1.0 - tc * tc)
        gpre = np.concatenate(
            [
                gc_tot * g * i * (1.0 - i),
                gc_tot * c * f * (1.0 - f),
                gc_tot * i * (1.0 - g * g),
                gh_new * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        ga = gpre @ p["W"]
        grads = {
            "W": _outer(gpre, a, per_sample),
            "b": _colsum(gpre, per_sample),
            "Wy": _outer(gy, h, per_sample),
            "by": _colsum(gy, per_sample),
        }
        gh = ga[:, self.n_in :] + gy @ p["Wy"]
        gx = np.concatenate([gh, gc_tot * f], axis=1)
        return gx, ga[:, : self.n_in], grads

    def tangent(self, p, cache, dx, dv, dp):
        H = self.hidden
        h, c, a, i, f, g, o, tc = cache
        dh, dc = dx[:, :H], dx[:, H:]
        da = np.concatenate([dv, dh], axis=1)
        dpre = da @ p["W"].T + a @ dp["W"].T + dp["b"]
        di = i * (1.0 - i) * dpre[:, :H]
        df = f * (1.0 - f) * dpre[:, H : 2 * H]
        dg = (1.0 - g * g) * dpre[:, 2 * H : 3 * H]
        do = o * (1.0 - o) * dpre[:, 3 * H :]
        dc_new = df * c + f * dc + di * g + i * dg
        dh_new = do * tc + o * (1.0 - tc * tc) * dc_new
        dy = dh @ p["Wy"].T + h @ dp["Wy"].T + dp["by"]
        return np.concatenate([dh_new, dc_new], axis=1), dy
