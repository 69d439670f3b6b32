"""Pipeline orchestration: data generation, training, adaptation, evaluation, reporting.

All stages read and write a single output directory::

    data/{role}.csv (+ .meta)     generated datasets in physical units
    model/model.json, theta.npy   nominal model with normalization statistics
    adapt/{method}.npz            adapted model (correction vector or parameters)
    predictions/{method}_{role}.csv
    figures/{role}.png
    report.csv, report.json, summary.txt, config_echo.cfg
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import benchmarks as bm
from .adaptation import (
    JfrPosterior,
    ekf_adapt,
    gp_predict,
    jfr_fit,
    jfr_predict,
    lm_jfr_fit,
    ntk_gram,
    regression_target,
    rls_stream,
)
from .io import METHODS, Normalizer, load_dataset, save_dataset
from .jacobians import Linearization
from .metrics import r2_index
from .model import ModelArch, ParamVector, Sequence, StateSpaceModel, initial_state_for, make_layout, simulate
from .training import TrainConfig, train_nominal

logger = logging.getLogger(__name__)

ROLES = ("train", "test", "transfer", "eval")
# fallback EKF measurement noise (relative to output variance) for noise-free transfer data
EKF_R_FLOOR = 1e-4


class StageError(RuntimeError):
    def __init__(self, stage, cause, report=None):
        self.stage = stage
        self.report = report
        super().__init__(f"stage '{stage}' failed: {cause}")


# ---------------------------------------------------------------------------
# configuration to library objects


def system_spec(cfg):
    sysc, sig = cfg["system"], cfg["signals"]
    spec = bm.default_system(sysc["name"])
    if spec.name == "cstr":
        if len(sig["cstr_T_range"]) != 2 or len(sig["cstr_q_range"]) != 2:
            raise ValueError("cstr_T_range and cstr_q_range need two values")
        roles = bm._cstr_roles(sig["cstr_T_range"], sig["cstr_q_range"], sig["cstr_period"], sig["cstr_hold"])
        perturbed = spec.perturbed
        if sysc["perturbed_E"]:
            perturbed = replace(perturbed, E=tuple(sysc["perturbed_E"]))
    else:
        roles = bm._rlc_roles(sig["rlc_bandwidth_scale"])
        kw = {k: sysc[f"perturbed_{k}"] for k in ("R", "L0", "C") if sysc[f"perturbed_{k}"] is not None}
        perturbed = replace(spec.perturbed, **kw)
    if sig["train_snr_db"] is not None:
        roles["train"] = replace(roles["train"], snr_db=sig["train_snr_db"])
    if sig["transfer_snr_db"] is not None:
        roles["transfer"] = replace(roles["transfer"], snr_db=sig["transfer_snr_db"])
    substeps = sysc["substeps"] or spec.substeps
    return bm.with_params(spec, roles=roles, perturbed=perturbed, substeps=substeps)


def model_arch(cfg, n_u, n_y):
    m = cfg["model"]
    n_x = 2 * m["hidden"] if m["cell_kind"] == "lstm" else m["n_x"]
    return ModelArch(m["cell_kind"], n_u, n_y, n_x, m["hidden"], m["output_feedback"], m["residual"], m["readout"])


def train_config(cfg, **kw):
    t = cfg["train"]
    base = TrainConfig(
        iterations=t["iterations"],
        batch_size=t["batch_size"],
        subseq_len=t["subseq_len"],
        context_len=t["context_len"],
        learning_rate=t["learning_rate"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        eps=t["eps"],
        seed=t["seed"],
    )
    return replace(base, **kw)


def run_id(cfg):
    return hashlib.sha256(cfg.to_text().encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# persisted artefacts


@dataclass
class NominalModel:
    model: StateSpaceModel
    theta: ParamVector
    norm: Normalizer
    seconds: float = 0.0
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))


def save_model(path, nm):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "theta.npy", nm.theta.values)
    np.save(path / "loss_history.npy", nm.history)
    info = {
        "arch": asdict(nm.model.arch),
        "layout": [[name, list(shape)] for name, _, shape in nm.theta.layout],
        "normalization": nm.norm.to_dict(),
        "train_seconds": nm.seconds,
    }
    (path / "model.json").write_text(json.dumps(info, indent=2))


def load_model(path):
    path = Path(path)
    mfile = path / "model.json"
    if not mfile.exists():
        raise FileNotFoundError(f"trained model not found: {mfile}")
    info = json.loads(mfile.read_text())
    model = StateSpaceModel(ModelArch(**info["arch"]))
    layout = make_layout([(name, tuple(shape)) for name, shape in info["layout"]])
    theta = ParamVector(np.load(path / "theta.npy"), layout)
    hist_file = path / "loss_history.npy"
    history = np.load(hist_file) if hist_file.exists() else np.zeros(0)
    return NominalModel(model, theta, Normalizer.from_dict(info["normalization"]), info["train_seconds"], history)


@dataclass
class Adapted:
    """Outcome of an adaptation method in normalized units.

    ``kind == "linear"``: predictions are ``y_nl + J_* vector`` (residual mode)
    or ``J_* vector`` (raw mode), with optional covariance ``cov``.
    ``kind == "theta"``: ``vector`` replaces the nominal parameters.
    """

    method: str
    kind: str
    vector: np.ndarray
    mode: str = "residual"
    cov: np.ndarray | None = None
    seconds: float = 0.0
    info: dict = field(default_factory=dict)

    def predict(self, nm, u, x0, want_var=False):
        if self.kind == "theta":
            y, _ = simulate(nm.model, u, x0, self.vector)
            return y, None
        post = JfrPosterior(self.vector, self.cov, float(self.info.get("sigma2", 0.0)), self.mode)
        mean, var = jfr_predict(nm.model, nm.theta, post, u, x0, want_var=want_var and self.cov is not None)
        n_y = nm.model.arch.n_y
        return mean.reshape(-1, n_y), None if var is None else var.reshape(-1, n_y)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {"vector": self.vector}
        if self.cov is not None:
            arrays["cov"] = self.cov
        meta = json.dumps({"method": self.method, "kind": self.kind, "mode": self.mode,
                           "seconds": self.seconds, "info": self.info})
        np.savez(path, meta=np.array(meta), **arrays)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"adapted model not found: {path}")
        with np.load(path) as f:
            meta = json.loads(str(f["meta"]))
            cov = f["cov"] if "cov" in f else None
            return cls(meta["method"], meta["kind"], f["vector"], meta["mode"], cov, meta["seconds"], meta["info"])


# ---------------------------------------------------------------------------
# stages


@dataclass
class Row:
    method: str
    dataset: str
    channel: int
    r2: float
    seconds: float


@dataclass
class Report:
    run_id: str
    seeds: dict
    rows: list = field(default_factory=list)
    phases: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def add(self, method, dataset, r2, seconds):
        # a later evaluation of the same model on the same data replaces the earlier one
        self.rows = [r for r in self.rows if (r.method, r.dataset) != (method, dataset)]
        for j, value in enumerate(np.atleast_1d(r2)):
            self.rows.append(Row(method, dataset, j, float(value), float(seconds)))

    def r2(self, method, dataset):
        vals = [r.r2 for r in self.rows if r.method == method and r.dataset == dataset]
        if not vals:
            raise KeyError(f"no result for {method} on {dataset}")
        return np.array(vals)

    def seconds(self, method):
        for r in self.rows:
            if r.method == method:
                return r.seconds
        raise KeyError(method)

    def write(self, out, cfg):
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "dataset", "channel", "r2", "seconds"])
            for r in self.rows:
                w.writerow([r.method, r.dataset, r.channel, format(r.r2, ".17g"), f"{r.seconds:.2f}"])
        (out / "config_echo.cfg").write_text(cfg.to_text())
        doc = {
            "run_id": self.run_id,
            "seeds": self.seeds,
            "phases": {k: round(v, 2) for k, v in self.phases.items()},
            "rows": [asdict(r) for r in self.rows],
            "notes": self.notes,
        }
        (out / "report.json").write_text(json.dumps(doc, indent=2))
        lines = [f"run {self.run_id}  seeds {self.seeds}", "", "wall clock per phase (s):"]
        lines += [f"  {k:<28s} {v:10.2f}" for k, v in self.phases.items()]
        lines += ["", f"{'method':<16s} {'dataset':<10s} {'R2 per channel':<28s} {'seconds':>9s}"]
        keys = []
        for r in self.rows:
            if (r.method, r.dataset) not in keys:
                keys.append((r.method, r.dataset))
        for method, dataset in keys:
            vals = "/".join(f"{v:.4f}" for v in self.r2(method, dataset))
            secs = next(r.seconds for r in self.rows if r.method == method and r.dataset == dataset)
            lines.append(f"{method:<16s} {dataset:<10s} {vals:<28s} {secs:9.2f}")
        lines += [f"note: {n}" for n in self.notes]
        (out / "summary.txt").write_text("\n".join(lines) + "\n")


class Experiment:
    """Runs pipeline stages for one config into one output directory."""

    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)
        seeds = {"data": cfg.get("system", "seed"), "train": cfg.get("train", "seed")}
        self.report = Report(run_id(cfg), seeds)

    # -- helpers ----------------------------------------------------------
    @contextmanager
    def phase(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.report.phases[name] = self.report.phases.get(name, 0.0) + time.perf_counter() - start

    def data_path(self, role):
        return self.out / "data" / f"{role}.csv"

    def load_role(self, role):
        return load_dataset(self.data_path(role))

    def finish(self):
        self.report.write(self.out, self.cfg)
        return self.report

    # -- generate ---------------------------------------------------------
    def generate(self, roles=ROLES):
        spec = system_spec(self.cfg)
        seed = self.cfg.get("system", "seed")
        paths = []
        for role in roles:
            with self.phase(f"generate:{role}"):
                seqs = bm.build_dataset(spec, role, seed)
                stats = Normalizer.fit(seqs)
                extra = {"substeps": spec.substeps, **{f"stat_{k}": v for k, v in stats.to_dict().items()}}
                save_dataset(self.data_path(role), seqs, extra)
            paths.append(self.data_path(role))
        return paths

    # -- train ------------------------------------------------------------
    def train(self):
        train = self.load_role("train")
        norm = Normalizer.fit(train)
        arch = model_arch(self.cfg, train[0].n_u, train[0].n_y)
        model = StateSpaceModel(arch)
        with self.phase("train"):
            start = time.perf_counter()
            theta, history = train_nominal(arch, [norm.apply(s) for s in train], train_config(self.cfg))
            seconds = time.perf_counter() - start
        nm = NominalModel(model, theta, norm, seconds, history)
        save_model(self.out / "model", nm)
        for role in ("train", "test"):
            if self.data_path(role).exists():
                self.evaluate_nominal(nm, role)
        return nm

    def nominal(self):
        return load_model(self.out / "model")

    # -- evaluation helpers ----------------------------------------------
    def windows(self, nm, seqs, n_ctx):
        """Normalized prediction windows and initial states for each sequence."""
        out = []
        for s in seqs:
            x0, win = initial_state_for(nm.model, nm.norm.apply(s), nm.theta, n_ctx)
            out.append((x0, win, s.window(len(s) - len(win), len(s))))
        return out

    def context_len(self, role):
        return self.cfg.get("train" if role in ("train", "test") else "adapt", "context_len")

    def _score(self, nm, method, role, seqs, predict, seconds, want_var=False):
        ys, yhs, vs = [], [], []
        for x0, win, raw in self.windows(nm, seqs, self.context_len(role)):
            mean, var = predict(win.u, x0)
            ys.append(raw.y)
            yhs.append(nm.norm.inverse_y(mean))
            vs.append(None if var is None else nm.norm.inverse_var(var))
        y, y_hat = np.concatenate(ys), np.concatenate(yhs)
        var = None if any(v is None for v in vs) else np.concatenate(vs)
        write_predictions(self.out / "predictions" / f"{method}_{role}.csv", y, y_hat, var)
        r2 = r2_index(y, y_hat)
        self.report.add(method, role, r2, seconds)
        return r2, y, y_hat

    def evaluate_nominal(self, nm, role):
        def predict(u, x0):
            return simulate(nm.model, u, x0, nm.theta)[0], None

        with self.phase(f"eval:nominal:{role}"):
            return self._score(nm, "nominal", role, self.load_role(role), predict, nm.seconds)

    def evaluate_adapted(self, nm, adapted, role):
        def predict(u, x0):
            return adapted.predict(nm, u, x0, want_var=True)

        with self.phase(f"eval:{adapted.method}:{role}"):
            return self._score(nm, adapted.method, role, self.load_role(role), predict, adapted.seconds)

    # -- adapt ------------------------------------------------------------
    def transfer_window(self, nm):
        xf = self.load_role("transfer")
        if len(xf) != 1:
            raise ValueError("adaptation expects a single transfer sequence")
        x0, win, _ = self.windows(nm, xf, self.cfg.get("adapt", "context_len"))[0]
        return x0, win

    def adapt(self, method=None, nm=None, save=True):
        method = method or self.cfg.get("adapt", "method")
        if method not in METHODS:
            raise ValueError(f"unknown adaptation method {method!r}")
        nm = nm or self.nominal()
        x0, win = self.transfer_window(nm)
        with self.phase(f"adapt:{method}"):
            adapted = ADAPTERS[method](self, nm, x0, win)
        if save:
            adapted.save(self.out / "adapt" / f"{method}.npz")
        return adapted

    # -- eval / compare ---------------------------------------------------
    def eval(self, method=None):
        method = method or self.cfg.get("adapt", "method")
        nm = self.nominal()
        adapted = Adapted.load(self.out / "adapt" / f"{method}.npz")
        preds = {}
        for role in ROLES:
            if self.data_path(role).exists():
                self.evaluate_nominal(nm, role)
        for role in ("transfer", "eval"):
            _, y, y_nom = self._last_nominal(nm, role)
            _, _, y_ad = self.evaluate_adapted(nm, adapted, role)
            preds[role] = (y, {"nominal": y_nom, method: y_ad})
        self.figures(preds)
        return self.report

    def _last_nominal(self, nm, role):
        path = self.out / "predictions" / f"nominal_{role}.csv"
        y, y_hat, _ = read_predictions(path)
        return None, y, y_hat

    def compare(self, methods=None):
        methods = methods or self.cfg.get("adapt", "compare_methods")
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods: {', '.join(unknown)}")
        nm = self.nominal()
        for role in ROLES:
            if self.data_path(role).exists():
                self.evaluate_nominal(nm, role)
        preds = {role: (None, {}) for role in ("transfer", "eval")}
        for role in preds:
            _, y, y_nom = self._last_nominal(nm, role)
            preds[role] = (y, {"nominal": y_nom})
        for method in methods:
            adapted = self.adapt(method, nm)
            for role in ("transfer", "eval"):
                _, _, y_hat = self.evaluate_adapted(nm, adapted, role)
                preds[role][1][method] = y_hat
        self.figures(preds)
        return self.report

    def figures(self, preds):
        if not self.cfg.get("report", "figures"):
            return
        from .plotting import plot_predictions

        fmt = self.cfg.get("report", "figure_format")
        for role, (y, curves) in preds.items():
            ts = self.load_role(role)[0].ts
            t = ts * np.arange(len(y))
            plot_predictions(self.out / "figures" / f"{role}.{fmt}", t, y, curves, title=role)

    # -- infer ------------------------------------------------------------
    def infer(self, input_path, method=None):
        nm = self.nominal()
        adapted = None
        if method and method != "nominal":
            adapted = Adapted.load(self.out / "adapt" / f"{method}.npz")
        seqs = load_dataset(input_path, require_outputs=False)
        n_ctx = self.cfg.get("adapt", "context_len")
        results = []
        for i, s in enumerate(seqs):
            ctx = n_ctx if s.y is not None else 0
            x0, win = initial_state_for(nm.model, nm.norm.apply(s), nm.theta, ctx)
            if adapted is None:
                mean, var = simulate(nm.model, win.u, x0, nm.theta)[0], None
            else:
                mean, var = adapted.predict(nm, win.u, x0, want_var=True)
            y_hat = nm.norm.inverse_y(mean)
            var = None if var is None else nm.norm.inverse_var(var)
            y = None if s.y is None else s.y[len(s) - len(win):]
            path = self.out / "infer" / f"predictions_{i}.csv"
            write_predictions(path, y, y_hat, var)
            results.append(path)
        return results


# ---------------------------------------------------------------------------
# adaptation methods: (experiment, nominal model, x0, transfer window) -> Adapted


def _acfg(exp):
    return exp.cfg["adapt"]


def _linear_fit(exp, nm, x0, win, naive):
    a = _acfg(exp)
    start = time.perf_counter()
    lin = Linearization(nm.model, nm.theta, win.u, x0)
    J = lin.jacobian_naive() if naive else lin.jacobian()
    post = jfr_fit(J, regression_target(lin, win.y, a["mode"]), a["sigma2"], a["want_cov"], a["mode"])
    seconds = time.perf_counter() - start
    name = "jfr_naive" if naive else "jfr"
    return Adapted(name, "linear", post.mean, a["mode"], post.cov, seconds, {"sigma2": a["sigma2"]})


def _adapt_jfr(exp, nm, x0, win):
    return _linear_fit(exp, nm, x0, win, naive=False)


def _adapt_jfr_naive(exp, nm, x0, win):
    return _linear_fit(exp, nm, x0, win, naive=True)


def _adapt_lm_jfr(exp, nm, x0, win):
    a = _acfg(exp)
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = lm_jfr_fit(nm.model, nm.theta, win, x0, a["sigma2"], a["lm_max_iters"],
                         a["lm_tol"], a["mode"])
    exp.report.notes.extend(f"lm_jfr: {w.message}" for w in caught)
    seconds = time.perf_counter() - start
    info = {"sigma2": a["sigma2"], "cg_iterations": res.iterations, "converged": res.converged}
    return Adapted("lm_jfr", "linear", res.mean, a["mode"], None, seconds, info)


def _adapt_gp(exp, nm, x0, win):
    a = _acfg(exp)
    start = time.perf_counter()
    gram = ntk_gram(nm.model, nm.theta, win.u, x0)
    pred = gp_predict(nm.model, nm.theta, gram, win.y.reshape(-1), a["sigma2"], win.u, x0, a["mode"],
                      a["cg_tol"], lin=gram.lin)
    # the predictive mean is linear in the features with weights J_xf^T alpha
    vector = gram.lin.vjp(pred.alpha)
    seconds = time.perf_counter() - start
    info = {"sigma2": a["sigma2"], "cg_iterations": pred.iterations, "converged": pred.converged}
    return Adapted("gp", "linear", vector, a["mode"], None, seconds, info)


def _adapt_rls(exp, nm, x0, win):
    a = _acfg(exp)
    start = time.perf_counter()
    lin = Linearization(nm.model, nm.theta, win.u, x0)
    state = rls_stream(lin, regression_target(lin, win.y.reshape(-1), a["mode"]), a["sigma2"])
    seconds = time.perf_counter() - start
    cov = state.P if a["want_cov"] else None
    return Adapted("rls", "linear", state.theta, a["mode"], cov, seconds, {"sigma2": a["sigma2"]})


def ekf_noise(exp, win):
    a = _acfg(exp)
    if a["ekf_r"] is not None:
        return a["ekf_r"]
    snr = exp.cfg["signals"]["transfer_snr_db"]
    if snr is None:
        snr = system_spec(exp.cfg).roles["transfer"].snr_db
    var = win.y.var(axis=0)
    if not np.isfinite(snr):
        return EKF_R_FLOOR * var
    return var / 10.0 ** (snr / 10.0)


def _adapt_ekf(exp, nm, x0, win):
    a = _acfg(exp)
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = ekf_adapt(nm.model, nm.theta, win, q_x=a["ekf_q_x"], q_theta=a["ekf_q_theta"],
                        r=ekf_noise(exp, win), p0_x=a["ekf_p0"], p0_theta=a["ekf_p0"], x0=x0)
    for w in caught:
        exp.report.notes.append(f"ekf: {w.message}")
    seconds = time.perf_counter() - start
    return Adapted("ekf", "theta", res.theta, seconds=seconds, info={"repairs": res.floored})


def _retrain(exp, nm, win, name, max_seconds=None):
    a = _acfg(exp)
    if a["retrain_init"] not in ("nominal", "scratch"):
        raise ValueError("retrain_init must be 'nominal' or 'scratch'")
    base = train_config(exp.cfg)
    L = min(base.subseq_len, len(win))
    ctx = min(base.context_len, L - 1)
    tc = replace(base, iterations=a["retrain_iterations"], stop_ratio=a["retrain_stop_ratio"],
                 subseq_len=L, context_len=ctx, max_seconds=max_seconds)
    theta0 = nm.theta if a["retrain_init"] == "nominal" else None
    start = time.perf_counter()
    theta, hist = train_nominal(nm.model, [win], tc, theta0=theta0)
    seconds = time.perf_counter() - start
    return Adapted(name, "theta", theta.values, seconds=seconds, info={"iterations": len(hist)})


def _adapt_retrain(exp, nm, x0, win):
    return _retrain(exp, nm, win, "retrain")


def _adapt_retrain_budget(exp, nm, x0, win):
    return _retrain(exp, nm, win, "retrain_budget", max_seconds=_acfg(exp)["retrain_budget_seconds"])


ADAPTERS = {
    "jfr": _adapt_jfr,
    "jfr_naive": _adapt_jfr_naive,
    "lm_jfr": _adapt_lm_jfr,
    "gp": _adapt_gp,
    "rls": _adapt_rls,
    "ekf": _adapt_ekf,
    "retrain": _adapt_retrain,
    "retrain_budget": _adapt_retrain_budget,
}


# ---------------------------------------------------------------------------
# prediction files


def write_predictions(path, y, y_hat, var=None):
    """Columns ``k, y0.., mean0.., var0..``; measured columns are omitted when ``y`` is None."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    y_hat = np.atleast_2d(np.asarray(y_hat).T).T
    n_y = y_hat.shape[1]
    header = ["k"]
    cols = []
    if y is not None:
        header += [f"y{j}" for j in range(n_y)]
        cols.append(np.atleast_2d(np.asarray(y).T).T)
    header += [f"mean{j}" for j in range(n_y)]
    cols.append(y_hat)
    if var is not None:
        header += [f"var{j}" for j in range(n_y)]
        cols.append(np.atleast_2d(np.asarray(var).T).T)
    data = np.concatenate(cols, axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, row in enumerate(data):
            w.writerow([k] + [format(v, ".17g") for v in row])


def read_predictions(path):
    """Returns ``(y, mean, var)``; missing parts are None."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row[1:]] for row in reader])
    names = header[1:]

    def pick(prefix):
        idx = [i for i, n in enumerate(names) if n.startswith(prefix) and n[len(prefix):].isdigit()]
        return data[:, idx] if idx else None

    return pick("y"), pick("mean"), pick("var")


# ---------------------------------------------------------------------------
# entry point


STAGES = ("generate", "train", "adapt", "eval", "compare", "infer")


def run_experiment(cfg, out, stages=("generate", "train", "compare")):
    """Run ``stages`` in order and write the report. Returns the Report.

    A failing stage raises StageError carrying the partial report, which is
    also written to disk.
    """
    exp = Experiment(cfg, out)
    for stage in stages:
        if stage not in STAGES or stage == "infer":
            raise ValueError(f"unknown stage {stage!r}")
        try:
            with exp.phase(f"stage:{stage}"):
                getattr(exp, stage)()
        except Exception as exc:
            exp.report.notes.append(f"aborted in stage {stage}: {exc}")
            exp.finish()
            raise StageError(stage, exc, exp.report) from exc
    return exp.finish()
