"""Recurrent state-space models: parameters, closed-loop simulation, state estimation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cells import LinearCell, LstmCell, MlpCell

DIVERGENCE_LIMIT = 1e6
CELL_KINDS = ("mlp_ss", "lstm", "linear")
ROLES = ("train", "test", "transfer", "eval", "other")


class DivergenceError(RuntimeError):
    """Raised when a rollout produces non-finite or exploding values."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"simulation diverged at step {step}")


class UnsupportedConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class ModelArch:
    """Architecture of a recurrent state-space model.

    For ``lstm`` the state stacks hidden and cell vectors, so ``n_x == 2 * hidden``.
    ``residual`` and ``readout`` only apply to ``mlp_ss``.
    """

    cell_kind: str
    n_u: int
    n_y: int
    n_x: int
    hidden: int
    output_feedback: bool = False
    residual: bool = True
    readout: str = "linear"

    def __post_init__(self):
        if self.cell_kind not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {self.cell_kind!r}")
        for name in ("n_u", "n_y", "n_x", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cell_kind == "lstm" and self.n_x != 2 * self.hidden:
            raise ValueError("lstm requires n_x == 2 * hidden")

    @property
    def n_in(self):
        return self.n_u + (self.n_y if self.output_feedback else 0)

    @property
    def n_z(self):
        """Size of the augmented state (x plus fed-back output)."""
        return self.n_x + (self.n_y if self.output_feedback else 0)


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector plus the layout of its named blocks."""

    values: np.ndarray
    layout: tuple  # ((name, offset, shape), ...)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        covered = 0
        for _, offset, shape in self.layout:
            if offset != covered:
                raise ValueError("layout entries must tile the vector contiguously")
            covered += int(np.prod(shape))
        if covered != values.size or values.ndim != 1:
            raise ValueError(f"layout covers {covered} entries, vector has {values.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains non-finite values")

    @property
    def size(self):
        return self.values.size

    def unflatten(self, values=None):
        """Dict of named array views into ``values`` (defaults to own values)."""
        v = self.values if values is None else values
        return {
            name: v[off : off + int(np.prod(shape))].reshape(shape)
            for name, off, shape in self.layout
        }

    def flatten(self, blocks):
        return flatten_blocks(self.layout, blocks)

    def with_values(self, values):
        return ParamVector(np.array(values, dtype=float), self.layout)

    def slice(self, name):
        for n, off, shape in self.layout:
            if n == name:
                return slice(off, off + int(np.prod(shape)))
        raise KeyError(name)


def flatten_blocks(layout, blocks):
    """Concatenate named blocks in layout order. Leading batch axes are kept."""
    first = blocks[layout[0][0]]
    lead = first.shape[: first.ndim - len(layout[0][2])]
    parts = [np.reshape(blocks[name], lead + (-1,)) for name, _, _ in layout]
    return np.concatenate(parts, axis=-1)


def make_layout(shapes):
    layout, offset = [], 0
    for name, shape in shapes:
        layout.append((name, offset, tuple(shape)))
        offset += int(np.prod(shape))
    return tuple(layout)


class StateSpaceModel:
    """A cell bound to its architecture; the object the simulation routines take."""

    def __init__(self, arch):
        self.arch = arch
        if arch.cell_kind == "lstm":
            self.cell = LstmCell(arch.n_in, arch.n_y, arch.hidden)
        elif arch.cell_kind == "mlp_ss":
            self.cell = MlpCell(
                arch.n_x, arch.n_in, arch.n_y, arch.hidden, arch.residual, arch.readout
            )
        else:
            self.cell = LinearCell(arch.n_x, arch.n_in, arch.n_y)
        self.layout = make_layout(self.cell.param_shapes())
        self.n_theta = sum(int(np.prod(s)) for _, _, s in self.layout)

    def __repr__(self):
        return f"StateSpaceModel({self.arch!r}, n_theta={self.n_theta})"

    def views(self, theta):
        values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta)
        if values.shape != (self.n_theta,):
            raise ValueError(f"expected {self.n_theta} parameters, got {values.shape}")
        return {
            name: values[off : off + int(np.prod(shape))].reshape(shape)
            for name, off, shape in self.layout
        }

    def flat_grads(self, grads):
        return flatten_blocks(self.layout, grads)


@dataclass(frozen=True)
class StateVector:
    x: np.ndarray
    y_prev: np.ndarray | None = None

    def augmented(self):
        if self.y_prev is None:
            return np.asarray(self.x, dtype=float)
        return np.concatenate([self.x, self.y_prev])

    @classmethod
    def zeros(cls, arch):
        y_prev = np.zeros(arch.n_y) if arch.output_feedback else None
        return cls(np.zeros(arch.n_x), y_prev)

    @classmethod
    def from_augmented(cls, arch, z):
        z = np.asarray(z, dtype=float)
        if arch.output_feedback:
            return cls(z[: arch.n_x].copy(), z[arch.n_x :].copy())
        return cls(z.copy())


@dataclass
class Sequence:
    """Input/output record with sample time ``ts`` in seconds."""

    u: np.ndarray
    y: np.ndarray | None = None
    ts: float = 1.0
    name: str = "other"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float).T).T
        if self.y is not None:
            self.y = np.atleast_2d(np.asarray(self.y, dtype=float).T).T
            if self.y.shape[0] != self.u.shape[0]:
                raise ValueError("u and y must have the same number of samples")
        if self.u.shape[0] < 1:
            raise ValueError("sequence must hold at least one sample")
        if not self.ts > 0:
            raise ValueError("sample time must be positive")
        if self.name not in ROLES:
            raise ValueError(f"unknown role {self.name!r}")

    def __len__(self):
        return self.u.shape[0]

    @property
    def n_u(self):
        return self.u.shape[1]

    @property
    def n_y(self):
        return None if self.y is None else self.y.shape[1]

    def window(self, start, stop):
        y = None if self.y is None else self.y[start:stop]
        return Sequence(self.u[start:stop], y, self.ts, self.name, dict(self.meta))


def init_params(model, seed):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, LSTM forget bias 1."""
    if isinstance(model, ModelArch):
        model = StateSpaceModel(model)
    rng = np.random.default_rng(seed)
    return ParamVector(flatten_blocks(model.layout, model.cell.init_values(rng)), model.layout)


def _check_guard(arr, step):
    if not np.all(np.isfinite(arr)) or np.max(np.abs(arr), initial=0.0) > DIVERGENCE_LIMIT:
        raise DivergenceError(step)


def rollout(model, theta, u, z0, y_meas=None, n_ctx=0, keep_cache=False, guard=True):
    """Batched closed-loop rollout on the augmented state.

    Args:
        u: (B, N, n_u) inputs.
        z0: (B, n_z) initial augmented state.
        y_meas: (B, >=n_ctx, n_y) measured outputs fed back during the first
            ``n_ctx`` steps (only used when the model has output feedback).
        n_ctx: number of leading steps whose feedback is the measurement.

    Returns:
        ``(y, z, caches)`` with y (B, N, n_y) the outputs ``G(x_k)``, z
        (B, N + 1, n_z) the augmented states and caches the per-step forward
        caches (``None`` unless ``keep_cache``).
    """
    arch = model.arch
    cell = model.cell
    p = model.views(theta)
    u = np.asarray(u, dtype=float)
    B, N, _ = u.shape
    z = np.empty((B, N + 1, arch.n_z))
    z[:, 0] = z0
    y_out = np.empty((B, N, arch.n_y))
    caches = [] if keep_cache else None
    fb = arch.output_feedback
    n_x = arch.n_x
    for k in range(N):
        x = z[:, k, :n_x]
        v = np.concatenate([u[:, k], z[:, k, n_x:]], axis=1) if fb else u[:, k]
        x_next, y, cache = cell.forward(p, x, v)
        if guard:
            _check_guard(x_next, k)
        y_out[:, k] = y
        z[:, k + 1, :n_x] = x_next
        if fb:
            z[:, k + 1, n_x:] = y_meas[:, k] if k < n_ctx else y
        if keep_cache:
            caches.append(cache)
    return y_out, z, caches


def cell_step(model, state, u_k, theta):
    """One step: ``(x_next, y_k)`` with ``y_k = G(x_k)`` and ``x_next = F(x_k, v_k)``."""
    arch = model.arch
    x = np.asarray(state.x, dtype=float)
    u_k = np.atleast_1d(np.asarray(u_k, dtype=float))
    if x.shape != (arch.n_x,) or u_k.shape != (arch.n_u,):
        raise ValueError("state or input dimension does not match the architecture")
    v = u_k
    if arch.output_feedback:
        if state.y_prev is None or np.shape(state.y_prev) != (arch.n_y,):
            raise ValueError("output-feedback model needs y_prev of length n_y")
        v = np.concatenate([u_k, state.y_prev])
    x_next, y, _ = model.cell.forward(model.views(theta), x[None], v[None])
    return x_next[0], y[0]


def simulate(model, u_seq, x0, theta):
    """Closed-loop simulation from ``x0``; returns ``(y_hat, x_traj)``.

    ``x_traj[k]`` is the state ``x_k`` from which ``y_hat[k]`` is read out.
    """
    arch = model.arch
    u = np.atleast_2d(np.asarray(u_seq, dtype=float).T).T
    if u.shape[1] != arch.n_u:
        raise ValueError(f"expected {arch.n_u} input channels, got {u.shape[1]}")
    if x0 is None:
        x0 = StateVector.zeros(arch)
    z0 = x0.augmented()
    if z0.shape != (arch.n_z,):
        raise ValueError("initial state dimension does not match the architecture")
    y, z, _ = rollout(model, theta, u[None], z0[None])
    return y[0], z[0, :-1, : arch.n_x]


def estimate_initial_state(model, context, theta):
    """Run the model with measured outputs fed back over the context window.

    Starts from the zero state. With an empty context the zero state is returned.
    """
    arch = model.arch
    n_c = 0 if context is None else len(context)
    if n_c == 0:
        return StateVector.zeros(arch)
    if not arch.output_feedback:
        raise UnsupportedConfiguration(
            "context-window state estimation needs an output-feedback model"
        )
    if context.y is None:
        raise ValueError("context window needs measured outputs")
    z0 = StateVector.zeros(arch).augmented()
    _, z, _ = rollout(model, theta, context.u[None], z0[None], context.y[None], n_ctx=n_c)
    return StateVector.from_augmented(arch, z[0, -1])


def split_context(seq, n_ctx):
    """Split a sequence into (context, remainder)."""
    if n_ctx < 0 or n_ctx >= len(seq):
        raise ValueError("context length must be in [0, N)")
    return seq.window(0, n_ctx) if n_ctx else None, seq.window(n_ctx, len(seq))


def initial_state_for(model, seq, theta, n_ctx):
    """Initial state and prediction window for a sequence.

    Output-feedback models estimate the state from the first ``n_ctx`` samples;
    other models start from zero and predict the whole sequence.
    """
    if n_ctx and model.arch.output_feedback:
        ctx, rest = split_context(seq, n_ctx)
        return estimate_initial_state(model, ctx, theta), rest
    return StateVector.zeros(model.arch), seq
