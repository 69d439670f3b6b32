"""Nominal model estimation by truncated simulation-error minimization with Adam."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .jacobians import adjoint_sweep
from .model import DivergenceError, ParamVector, StateSpaceModel, init_params, rollout

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, last_loss):
        self.iteration = iteration
        self.last_loss = last_loss
        super().__init__(
            f"training diverged at iteration {iteration} (last finite loss {last_loss:.6g})"
        )


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 16
    subseq_len: int = 256
    context_len: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # stop once loss < stop_ratio * initial loss (None disables)
    stop_ratio: float | None = None
    max_seconds: float | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.subseq_len > self.context_len >= 0:
            raise ValueError("need subseq_len > context_len >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Minibatch:
    u: np.ndarray  # (B, L, n_u), context first
    y: np.ndarray  # (B, L, n_y)
    n_ctx: int
    seq_index: np.ndarray
    offsets: np.ndarray

    @property
    def context_u(self):
        return self.u[:, : self.n_ctx]

    @property
    def context_y(self):
        return self.y[:, : self.n_ctx]

    @property
    def target_u(self):
        return self.u[:, self.n_ctx :]

    @property
    def target_y(self):
        return self.y[:, self.n_ctx :]


def mse_loss(y, y_hat):
    """Mean over time of the squared error summed over channels."""
    y = np.atleast_2d(np.asarray(y, dtype=float).T).T
    y_hat = np.atleast_2d(np.asarray(y_hat, dtype=float).T).T
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    return float(np.sum((y - y_hat) ** 2) / y.shape[0])


def adam_step(theta, grad, moments, t, config):
    """Bias-corrected Adam update. ``moments`` is ``(m, v)`` or ``None`` at start."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if moments is None:
        m, v = np.zeros_like(theta), np.zeros_like(theta)
    else:
        m, v = moments
    m = config.beta1 * m + (1.0 - config.beta1) * grad
    v = config.beta2 * v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    theta = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return theta, (m, v)


def sample_minibatch(dataset, config, rng):
    """Draw ``batch_size`` windows uniformly with replacement over all start positions."""
    L = config.subseq_len
    lengths = np.array([len(s) for s in dataset])
    if np.any(lengths < L):
        raise ValueError(f"sequence shorter than subseq_len={L}")
    counts = lengths - L + 1
    flat = rng.integers(0, counts.sum(), size=config.batch_size)
    bounds = np.cumsum(counts)
    seq_index = np.searchsorted(bounds, flat, side="right")
    offsets = flat - np.concatenate([[0], bounds[:-1]])[seq_index]
    u = np.stack([dataset[i].u[o : o + L] for i, o in zip(seq_index, offsets)])
    y = np.stack([dataset[i].y[o : o + L] for i, o in zip(seq_index, offsets)])
    return Minibatch(u, y, config.context_len, seq_index, offsets)


def batch_loss_and_grad(model, theta, batch):
    """Loss on the prediction part of each window and its gradient.

    Output-feedback models see measured outputs during the context; others
    simply run from zero over it (washout). Gradients flow through the context.
    """
    B, L, _ = batch.u.shape
    n_ctx = batch.n_ctx
    n_pred = L - n_ctx
    z0 = np.zeros((B, model.arch.n_z))
    y_hat, _, caches = rollout(model, theta, batch.u, z0, batch.y, n_ctx, keep_cache=True)
    err = y_hat[:, n_ctx:] - batch.y[:, n_ctx:]
    loss = float(np.sum(err**2) / (B * n_pred))
    W = np.zeros_like(y_hat)
    W[:, n_ctx:] = 2.0 * err / (B * n_pred)
    grad = adjoint_sweep(model, model.views(theta), caches, W, n_ctx)
    return loss, grad


def train_nominal(arch, dataset, config, theta0=None):
    """Fit a model to ``dataset`` (list of Sequence) by minibatch Adam.

    Returns ``(theta, loss_history)``. ``theta0`` warm-starts the optimization.
    """
    model = arch if isinstance(arch, StateSpaceModel) else StateSpaceModel(arch)
    rng = np.random.default_rng(config.seed)
    theta = init_params(model, config.seed) if theta0 is None else theta0
    layout = theta.layout
    values = theta.values.copy()
    moments = None
    history = []
    last_loss = float("nan")
    start = time.perf_counter()
    for it in range(1, config.iterations + 1):
        batch = sample_minibatch(dataset, config, rng)
        try:
            loss, grad = batch_loss_and_grad(model, values, batch)
        except DivergenceError as exc:
            raise TrainingDiverged(it, last_loss) from exc
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(it, last_loss)
        history.append(loss)
        last_loss = loss
        values, moments = adam_step(values, grad, moments, it, config)
        if it % 500 == 0:
            logger.info("iter %d loss %.4g", it, loss)
        if config.stop_ratio is not None and loss < config.stop_ratio * history[0]:
            break
        if config.max_seconds is not None and time.perf_counter() - start > config.max_seconds:
            break
    return ParamVector(values, layout), np.array(history)
