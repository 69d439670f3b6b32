"""Ground-truth benchmark systems (CSTR and nonlinear RLC) and input generators."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps

from .model import DivergenceError, Sequence


@dataclass(frozen=True)
class CstrParams:
    CA0: float = 0.8
    k0: tuple = (1.0, 0.7, 0.1, 0.006)
    E: tuple = (8.33, 10.0, 50.0, 83.3)

    def __post_init__(self):
        vals = (self.CA0, *self.k0, *self.E)
        if len(self.k0) != 4 or len(self.E) != 4 or not np.all(np.isfinite(vals)):
            raise ValueError("CSTR needs four finite k0 and E values")
        if min(self.k0) <= 0:
            raise ValueError("k0 must be positive")


@dataclass(frozen=True)
class RlcParams:
    R: float = 3.0
    L0: float = 50e-6
    C: float = 270e-9

    def __post_init__(self):
        if not (self.R > 0 and self.L0 > 0 and self.C > 0):
            raise ValueError("R, L0 and C must be positive")


CSTR_NOMINAL = CstrParams()
CSTR_PERTURBED = CstrParams(E=(7.33, 9.0, 60.0, 93.3))
RLC_NOMINAL = RlcParams()
RLC_PERTURBED = RlcParams(R=4.0, L0=50e-6, C=350e-9)


def cstr_rates(T, p):
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("temperature must be positive")
    inv = 1.0 / T - 1.0
    return [k0 * np.exp(-E * inv) for k0, E in zip(p.k0, p.E)]


def cstr_derivatives(state, inp, p=CSTR_NOMINAL):
    """CSTR right-hand side. ``state = (CA, CR)``, ``inp = (T, q)``; leading axes broadcast."""
    state = np.asarray(state, dtype=float)
    inp = np.asarray(inp, dtype=float)
    CA, CR = state[..., 0], state[..., 1]
    T, q = inp[..., 0], inp[..., 1]
    k1, k2, k3, k4 = cstr_rates(T, p)
    dCA = q * (p.CA0 - CA) - k1 * CA + k4 * CR
    dCR = q * (1.0 - p.CA0 - CR) + k1 * CR + k3 * (1.0 - CA - CR) - (k2 + k4) * CR
    return np.stack([dCA, dCR], axis=-1)


def rlc_inductance(iL, L0):
    return L0 * ((0.9 / np.pi) * np.arctan(-5.0 * (np.abs(iL) - 5.0)) + 0.5 + 0.1)


def rlc_derivatives(state, v_in, p=RLC_NOMINAL):
    """RLC right-hand side. ``state = (vC, iL)``; ``v_in`` has a trailing axis of 1 or none."""
    state = np.asarray(state, dtype=float)
    v_in = np.asarray(v_in, dtype=float)
    if v_in.ndim == state.ndim:
        v_in = v_in[..., 0]
    vC, iL = state[..., 0], state[..., 1]
    L = rlc_inductance(iL, p.L0)
    return np.stack([iL / p.C, (-vC - p.R * iL + v_in) / L], axis=-1)


def integrate(deriv_fn, x0, u_seq, ts, method="rk4", substeps=1):
    """Fixed-step integration under zero-order-hold inputs.

    ``u_seq`` is time-major: (N, n_u) or (N, B, n_u) with ``x0`` of shape (B, n).
    Returns the N + 1 sampled states, ``x[0] = x0``.
    """
    if not ts > 0:
        raise ValueError("sample time must be positive")
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    u = np.asarray(u_seq, dtype=float)
    x = np.array(x0, dtype=float)
    out = np.empty((u.shape[0] + 1,) + x.shape)
    out[0] = x
    h = ts / substeps
    for k in range(u.shape[0]):
        uk = u[k]
        for _ in range(substeps):
            if method == "euler":
                x = x + h * deriv_fn(x, uk)
            else:
                k1 = deriv_fn(x, uk)
                k2 = deriv_fn(x + 0.5 * h * k1, uk)
                k3 = deriv_fn(x + 0.5 * h * k2, uk)
                k4 = deriv_fn(x + h * k3, uk)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k, f"integration diverged at step {k}")
        out[k + 1] = x
    return out


def _rng(seed):
    return np.random.default_rng(seed)


def gen_triangular(n, period, lo, hi, seed=0):
    """Triangular wave between ``lo`` and ``hi`` with a seeded integer phase."""
    if period < 2:
        raise ValueError("period must be >= 2")
    if not lo < hi:
        raise ValueError("need lo < hi")
    phase = _rng(seed).integers(period)
    t = (np.arange(n) + phase) % period
    half = period / 2.0
    return lo + (hi - lo) * (1.0 - np.abs(t - half) / half)


def gen_random_steps(n, hold, lo, hi, seed=0):
    """Piecewise-constant signal with i.i.d. uniform levels held ``hold`` samples."""
    if hold < 2:
        raise ValueError("hold must be >= 2")
    if not lo < hi:
        raise ValueError("need lo < hi")
    levels = _rng(seed).uniform(lo, hi, size=-(-n // hold))
    return np.repeat(levels, hold)[:n]


def lowpass_sections(ts, bandwidth_hz):
    """Two identical bilinear first-order sections with overall -3 dB at ``bandwidth_hz``."""
    fs = 1.0 / ts
    if not 0 < bandwidth_hz < fs / 2:
        raise ValueError("bandwidth must lie in (0, Nyquist)")
    # each section sits at fc so that |H(fb)|^2 = 1/2 for the cascade
    fc = bandwidth_hz / np.sqrt(np.sqrt(2.0) - 1.0)
    # prewarp the analogue corner so the digital -3 dB point lands on bandwidth_hz
    wb = 2.0 * fs * np.tan(np.pi * bandwidth_hz / fs)
    wc = wb * fc / bandwidth_hz
    b, a = sps.bilinear([wc], [1.0, wc], fs=fs)
    return b, a


def gen_filtered_noise(n, ts, bandwidth_hz, std, seed=0, burn_in=1000):
    """Low-pass filtered white Gaussian noise rescaled to sample std ``std`` (zero mean)."""
    b, a = lowpass_sections(ts, bandwidth_hz)
    w = _rng(seed).standard_normal(n + burn_in)
    x = sps.lfilter(b, a, sps.lfilter(b, a, w))[burn_in:]
    x = x - x.mean()
    return x * (std / x.std())


def add_noise_snr(y, snr_db, seed=0):
    """Add white Gaussian noise with variance ``var(y) / 10**(snr_db / 10)`` per channel."""
    y = np.asarray(y, dtype=float)
    if np.isinf(snr_db) and snr_db > 0:
        return y.copy()
    var = y.var(axis=0)
    if np.any(var == 0):
        raise ValueError("SNR is undefined for a constant signal")
    noise_std = np.sqrt(var / 10.0 ** (snr_db / 10.0))
    return y + noise_std * _rng(seed).standard_normal(y.shape)


@dataclass(frozen=True)
class SignalSpec:
    """Input signal description. Unused fields are ignored for a given kind."""

    kind: str
    lo: float = 0.0
    hi: float = 1.0
    period: int = 64
    hold: int = 64
    bandwidth_hz: float = 1.0
    std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("triangular", "random_steps", "filtered_noise"):
            raise ValueError(f"unknown signal kind {self.kind!r}")

    def generate(self, n, ts, seed):
        if self.kind == "triangular":
            return gen_triangular(n, self.period, self.lo, self.hi, seed)
        if self.kind == "random_steps":
            return gen_random_steps(n, self.hold, self.lo, self.hi, seed)
        return gen_filtered_noise(n, ts, self.bandwidth_hz, self.std, seed)


@dataclass(frozen=True)
class RoleSpec:
    n_seq: int
    length: int
    signals: tuple  # one SignalSpec per input channel
    snr_db: float = float("inf")


def _cstr_roles(T_range=(0.9, 1.1), q_range=(0.8, 1.2), period=64, hold=64):
    sig = (
        SignalSpec("triangular", lo=T_range[0], hi=T_range[1], period=period),
        SignalSpec("random_steps", lo=q_range[0], hi=q_range[1], hold=hold),
    )
    return {
        "train": RoleSpec(64, 256, sig),
        "test": RoleSpec(1, 1024, sig),
        "transfer": RoleSpec(1, 1024, sig),
        "eval": RoleSpec(1, 1024, sig),
    }


# The RLC input bandwidths 80/90/100/100 k are read as angular frequencies;
# this factor converts them to Hz (set 1.0 to read them as Hz).
RLC_BANDWIDTH_SCALE = 1.0 / (2.0 * np.pi)


def _rlc_roles(bandwidth_scale=RLC_BANDWIDTH_SCALE):
    def noise(bw, std):
        return (SignalSpec("filtered_noise", bandwidth_hz=bw * bandwidth_scale, std=std),)

    return {
        "train": RoleSpec(1, 2000, noise(80e3, 80.0), 20.0),
        "test": RoleSpec(1, 2000, noise(90e3, 70.0)),
        "transfer": RoleSpec(1, 2000, noise(100e3, 70.0), 18.8),
        "eval": RoleSpec(1, 2000, noise(100e3, 70.0)),
    }


@dataclass(frozen=True)
class SystemSpec:
    name: str
    ts: float
    roles: dict = field(default_factory=dict)
    nominal: object = None
    perturbed: object = None
    substeps: int = 1


def default_system(name):
    if name == "cstr":
        return SystemSpec("cstr", 0.1, _cstr_roles(), CSTR_NOMINAL, CSTR_PERTURBED, substeps=10)
    if name == "rlc":
        return SystemSpec("rlc", 1e-6, _rlc_roles(), RLC_NOMINAL, RLC_PERTURBED, substeps=32)
    raise ValueError(f"unknown system {name!r}")


ROLE_IDS = {"train": 0, "test": 1, "transfer": 2, "eval": 3, "other": 4}
DEFAULT_VARIANT = {"train": "nominal", "test": "nominal", "transfer": "perturbed", "eval": "perturbed"}


def _simulate_system(system, params, u, ts, substeps):
    """u: (N, B, n_u) time-major. Returns outputs (N, B, n_y)."""
    B = u.shape[1]
    if system.name == "cstr":
        def f(x, uk):
            return cstr_derivatives(x, uk, params)

        # settle at the first input level so sequences start near steady state
        warm = np.repeat(u[:1], 200, axis=0)
        x0 = integrate(f, np.tile([0.5, 0.3], (B, 1)), warm, ts, "rk4", substeps)[-1]
        x = integrate(f, x0, u, ts, "rk4", substeps)[:-1]
        return x
    def f(x, uk):
        return rlc_derivatives(x, uk, params)

    x = integrate(f, np.zeros((B, 2)), u, ts, "rk4", substeps)[:-1]
    return x[..., :1]


def build_dataset(system, role, seed, variant=None, params=None):
    """Simulate one role of a benchmark; returns a list of Sequence.

    ``system`` is a name or a SystemSpec. ``variant`` picks nominal or
    perturbed parameters (default follows the role); ``params`` overrides both.
    Measurement noise is added only where the role's SNR is finite.
    """
    spec = default_system(system) if isinstance(system, str) else system
    rs = spec.roles[role]
    variant = variant or DEFAULT_VARIANT.get(role, "nominal")
    if params is None:
        params = spec.nominal if variant == "nominal" else spec.perturbed
    ss = np.random.SeedSequence([seed, ROLE_IDS[role]])
    children = ss.spawn(rs.n_seq)
    u = np.empty((rs.length, rs.n_seq, len(rs.signals)))
    noise_seeds = []
    for i, child in enumerate(children):
        sig_seeds = child.spawn(len(rs.signals) + 1)
        for j, sig in enumerate(rs.signals):
            u[:, i, j] = sig.generate(rs.length, spec.ts, sig_seeds[j])
        noise_seeds.append(sig_seeds[-1])
    y = _simulate_system(spec, params, u, spec.ts, spec.substeps)
    if spec.name == "cstr" and (np.any(y < 0) or np.any(y > 1)):
        raise ValueError("CSTR concentrations left [0, 1]; check the input ranges")
    seqs = []
    for i in range(rs.n_seq):
        yi = y[:, i]
        if np.isfinite(rs.snr_db):
            yi = add_noise_snr(yi, rs.snr_db, noise_seeds[i])
        meta = {
            "system": spec.name,
            "variant": variant,
            "role": role,
            "seed": seed,
            "index": i,
            "snr_db": rs.snr_db,
            "params": repr(params),
        }
        seqs.append(Sequence(u[:, i], yi, spec.ts, role, meta))
    return seqs


def with_params(spec, **kw):
    return replace(spec, **kw)
