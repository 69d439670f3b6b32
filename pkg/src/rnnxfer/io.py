"""Dataset files, experiment configuration and normalization statistics.

A dataset is a CSV with header ``k,u0..,y0..`` plus a ``.meta`` sidecar of
``key = value`` lines. Several sequences may share one file; ``k`` restarts
at 0 at the start of each one.
"""

from __future__ import annotations

import configparser
import csv
import io as _io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Sequence


class DatasetFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


META_KEYS = ("ts", "role", "n_u", "n_y", "n_seq", "lengths")


def meta_path(path):
    path = Path(path)
    return path.with_suffix(".meta")


def _fmt(x):
    return format(float(x), ".17g")


def write_meta(path, meta):
    with open(path, "w") as fh:
        for key in sorted(meta):
            value = meta[key]
            if isinstance(value, (list, tuple, np.ndarray)):
                value = " ".join(_fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in value)
            elif isinstance(value, (float, np.floating)):
                value = _fmt(value)
            fh.write(f"{key} = {value}\n")


def read_meta(path):
    meta = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetFormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta


def save_dataset(path, seqs, extra_meta=None):
    """Write one or more sequences sharing input/output dimensions."""
    if isinstance(seqs, Sequence):
        seqs = [seqs]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_u, n_y = seqs[0].n_u, seqs[0].n_y or 0
    header = ["k"] + [f"u{i}" for i in range(n_u)] + [f"y{j}" for j in range(n_y)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in seqs:
            if s.n_u != n_u or (s.n_y or 0) != n_y:
                raise ValueError("all sequences in a file must share dimensions")
            y = s.y if n_y else np.zeros((len(s), 0))
            for k in range(len(s)):
                w.writerow([k] + [_fmt(v) for v in s.u[k]] + [_fmt(v) for v in y[k]])
    meta = {key: value for key, value in seqs[0].meta.items() if key != "index"}
    meta.update(extra_meta or {})
    meta.update(
        ts=seqs[0].ts,
        role=seqs[0].name,
        n_u=n_u,
        n_y=n_y,
        n_seq=len(seqs),
        lengths=[len(s) for s in seqs],
    )
    write_meta(meta_path(path), meta)


def parse_header(header, require_outputs=True):
    """Return (n_u, n_y) from a ``k,u0..,y0..`` header."""
    if not header or header[0] != "k":
        raise DatasetFormatError("header must start with 'k'")
    us = [h for h in header[1:] if h.startswith("u")]
    ys = [h for h in header[1:] if h.startswith("y")]
    expected = ["k"] + [f"u{i}" for i in range(len(us))] + [f"y{j}" for j in range(len(ys))]
    if header != expected or not us or (require_outputs and not ys):
        raise DatasetFormatError(f"malformed header {','.join(header)}")
    return len(us), len(ys)


def load_dataset(path, require_outputs=True):
    """Read a dataset file and its sidecar; returns a list of Sequence.

    With ``require_outputs=False`` an input-only file (no ``y`` columns) is
    accepted and its sequences carry ``y = None``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    mpath = meta_path(path)
    if not mpath.exists():
        raise FileNotFoundError(f"metadata sidecar not found: {mpath}")
    meta = read_meta(mpath)
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise DatasetFormatError(f"{mpath}: missing keys {', '.join(missing)}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}:1: empty file") from None
        n_u, n_y = parse_header(header, require_outputs)
        width = 1 + n_u + n_y
        ks, rows = [], []
        for lineno, row in enumerate(reader, 2):
            if len(row) != width:
                raise DatasetFormatError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                k = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: non-numeric field") from None
            if not np.all(np.isfinite(vals)):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite value")
            ks.append(k)
            rows.append(vals)
    if int(meta["n_u"]) != n_u or int(meta["n_y"]) != n_y:
        raise DatasetFormatError(f"{mpath}: n_u/n_y disagree with the CSV header")
    lengths = [int(v) for v in meta["lengths"].split()]
    if sum(lengths) != len(rows) or len(lengths) != int(meta["n_seq"]):
        raise DatasetFormatError(f"{mpath}: sequence lengths disagree with the CSV row count")
    data = np.array(rows, dtype=float).reshape(len(rows), width - 1)
    ts = float(meta["ts"])
    role = meta["role"]
    seqs, start = [], 0
    for i, n in enumerate(lengths):
        if ks[start : start + n] != list(range(n)):
            raise DatasetFormatError(f"{path}:{start + 2}: time index does not restart at 0")
        block = data[start : start + n]
        m = dict(meta)
        m["index"] = i
        y = block[:, n_u:] if n_y else None
        seqs.append(Sequence(block[:, :n_u], y, ts, role, m))
        start += n
    return seqs


@dataclass
class Normalizer:
    """Per-channel affine scaling with statistics from the training set."""

    u_mean: np.ndarray
    u_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, seqs):
        U = np.concatenate([s.u for s in seqs])
        Y = np.concatenate([s.y for s in seqs])
        u_std = U.std(axis=0)
        y_std = Y.std(axis=0)
        u_std[u_std == 0] = 1.0
        y_std[y_std == 0] = 1.0
        return cls(U.mean(axis=0), u_std, Y.mean(axis=0), y_std)

    def apply(self, seq):
        y = None if seq.y is None else (seq.y - self.y_mean) / self.y_std
        return Sequence((seq.u - self.u_mean) / self.u_std, y, seq.ts, seq.name, dict(seq.meta))

    def inverse_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    def inverse_var(self, var):
        return np.asarray(var) * self.y_std**2

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("u_mean", "u_std", "y_mean", "y_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=float) for k in ("u_mean", "u_std", "y_mean", "y_std")))


# ---------------------------------------------------------------------------
# experiment configuration

_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _bool(s):
    try:
        return _BOOL[str(s).strip().lower()]
    except KeyError:
        raise ConfigError(f"not a boolean: {s!r}") from None


def _floats(s):
    return tuple(float(v) for v in str(s).replace(",", " ").split())


def _words(s):
    return tuple(v for v in str(s).replace(",", " ").split())


METHODS = ("jfr", "jfr_naive", "lm_jfr", "gp", "rls", "ekf", "retrain", "retrain_budget")


def _choice(*allowed):
    def conv(s):
        s = str(s).strip()
        if s not in allowed:
            raise ValueError(f"{s!r} is not one of {', '.join(allowed)}")
        return s

    return conv


def _methods(s):
    words = _words(s)
    bad = [w for w in words if w not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {', '.join(bad)}")
    return words


def _opt_float(s):
    s = str(s).strip().lower()
    return None if s in ("", "none") else float(s)


SCHEMA = {
    "system": {
        "name": (str, "rlc"),
        "seed": (int, 0),
        "substeps": (int, 0),  # 0 = system default
        # perturbed parameters; empty = the built-in perturbed configuration
        "perturbed_R": (_opt_float, None),
        "perturbed_L0": (_opt_float, None),
        "perturbed_C": (_opt_float, None),
        "perturbed_E": (_floats, ()),
    },
    "signals": {
        "cstr_T_range": (_floats, (0.9, 1.1)),
        "cstr_q_range": (_floats, (0.8, 1.2)),
        "cstr_period": (int, 64),
        "cstr_hold": (int, 64),
        "rlc_bandwidth_scale": (float, 1.0 / (2.0 * np.pi)),
        "train_snr_db": (_opt_float, None),
        "transfer_snr_db": (_opt_float, None),
    },
    "model": {
        "cell_kind": (_choice("mlp_ss", "lstm", "linear"), "mlp_ss"),
        "hidden": (int, 64),
        "n_x": (int, 2),
        "output_feedback": (_bool, False),
        "residual": (_bool, True),
        "readout": (_choice("selector", "linear"), "selector"),
    },
    "train": {
        "iterations": (int, 10000),
        "batch_size": (int, 16),
        "subseq_len": (int, 256),
        "context_len": (int, 100),
        "learning_rate": (float, 3e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "seed": (int, 0),
    },
    "adapt": {
        "method": (_choice(*METHODS), "jfr"),
        "mode": (_choice("residual", "raw"), "residual"),
        "sigma2": (float, 1e-2),
        "context_len": (int, 0),
        "want_cov": (_bool, True),
        "cg_tol": (float, 1e-8),
        "lm_tol": (float, 1e-8),
        "lm_max_iters": (int, 5000),
        "ekf_q_x": (float, 1e-6),
        "ekf_q_theta": (float, 1e-8),
        "ekf_p0": (float, 1e-4),
        "ekf_r": (_opt_float, None),  # None = from the transfer SNR
        "retrain_iterations": (int, 10000),
        "retrain_stop_ratio": (float, 0.01),
        "retrain_init": (_choice("nominal", "scratch"), "nominal"),
        "retrain_budget_seconds": (float, 15.0),
        "compare_methods": (_methods, ("jfr", "jfr_naive", "lm_jfr", "gp", "rls", "ekf", "retrain")),
    },
    "report": {
        "figures": (_bool, True),
        "figure_format": (_choice("png", "pdf", "svg"), "png"),
    },
}

SYSTEM_DEFAULTS = {
    "cstr": {
        "model": {"cell_kind": "lstm", "hidden": 16, "n_x": 32, "output_feedback": True, "readout": "linear"},
        "train": {"iterations": 4000, "context_len": 25, "learning_rate": 3e-3},
        "adapt": {"context_len": 25, "compare_methods": ("jfr", "lm_jfr", "gp", "rls")},
    },
    "rlc": {},
}


@dataclass
class ExperimentConfig:
    sections: dict

    def __getitem__(self, section):
        return self.sections[section]

    def get(self, section, key):
        return self.sections[section][key]

    @property
    def system(self):
        return self.sections["system"]["name"]

    def with_seed(self, seed):
        sections = {s: dict(v) for s, v in self.sections.items()}
        sections["system"]["seed"] = seed
        sections["train"]["seed"] = seed
        return ExperimentConfig(sections)

    def override(self, section, **kw):
        sections = {s: dict(v) for s, v in self.sections.items()}
        for key, value in kw.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            sections[section][key] = value
        return ExperimentConfig(sections)

    def to_text(self):
        out = _io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_render(self.sections[section][key])}\n")
            out.write("\n")
        return out.getvalue()


def _render(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _fmt(value)
    if isinstance(value, tuple):
        return " ".join(_render(v) for v in value)
    return str(value)


def parse_config(text):
    """Parse a sectioned key-value config; unknown sections or keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
    name = cp.get("system", "name", fallback=SCHEMA["system"]["name"][1])
    if name not in SYSTEM_DEFAULTS:
        raise ConfigError(f"unknown system {name!r}")
    sections = {}
    for section, keys in SCHEMA.items():
        values = {}
        sys_defaults = SYSTEM_DEFAULTS[name].get(section, {})
        for key, (conv, default) in keys.items():
            default = sys_defaults.get(key, default)
            if cp.has_option(section, key):
                try:
                    values[key] = conv(cp.get(section, key))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from None
            else:
                values[key] = default
        sections[section] = values
    return ExperimentConfig(sections)


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    return parse_config(path.read_text())


def default_config(system="rlc"):
    return parse_config(f"[system]\nname = {system}\n")
