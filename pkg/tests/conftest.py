import time
from pathlib import Path

import numpy as np
import pytest

from rnnxfer.experiment import run_experiment
from rnnxfer.io import load_config
from rnnxfer.model import ModelArch, ParamVector, StateSpaceModel, StateVector, init_params

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# small architectures covering every cell kind and feedback setting
SMALL_ARCHS = [
    ModelArch("linear", 1, 1, 2, 1),
    ModelArch("mlp_ss", 2, 1, 3, 5, readout="selector"),
    ModelArch("mlp_ss", 1, 2, 3, 4, readout="linear"),
    ModelArch("mlp_ss", 1, 2, 3, 4, output_feedback=True, readout="linear"),
    ModelArch("mlp_ss", 1, 1, 2, 6, residual=False, readout="linear"),
    ModelArch("lstm", 2, 1, 6, 3),
    ModelArch("lstm", 1, 2, 8, 4, output_feedback=True),
]


def stable_linear_theta(model, rng, radius=0.8):
    p = model.cell.init_values(rng)
    A = p["A"]
    rho = max(np.abs(np.linalg.eigvals(A)).max(), 1e-12)
    p["A"] = A * (radius / rho) if rho > radius else A
    return ParamVector(model.flat_grads({k: v for k, v in p.items()}), model.layout)


def random_problem(arch, seed, N=24, perturb=0.3):
    """Model, parameters, input sequence and initial state for derivative tests."""
    rng = np.random.default_rng(seed)
    model = StateSpaceModel(arch)
    if arch.cell_kind == "linear":
        theta = stable_linear_theta(model, rng)
    else:
        theta = init_params(model, seed)
        theta = theta.with_values(theta.values + perturb * rng.standard_normal(model.n_theta) / np.sqrt(arch.hidden))
    u = rng.standard_normal((N, arch.n_u))
    x0 = StateVector(0.3 * rng.standard_normal(arch.n_x),
                     0.3 * rng.standard_normal(arch.n_y) if arch.output_feedback else None)
    return model, theta, u, x0


def rel_err(a, b):
    scale = max(np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


@pytest.fixture(params=range(len(SMALL_ARCHS)), ids=lambda i: f"{SMALL_ARCHS[i].cell_kind}{i}")
def small_problem(request):
    return random_problem(SMALL_ARCHS[request.param], seed=100 + request.param)


class PipelineRun:
    def __init__(self, cfg, out, report, seconds):
        self.cfg = cfg
        self.out = out
        self.report = report
        self.seconds = seconds


def _run(name, tmp_path_factory):
    cfg = load_config(CONFIGS / f"{name}.cfg")
    out = tmp_path_factory.mktemp(f"{name}_run")
    start = time.perf_counter()
    report = run_experiment(cfg, out, stages=("generate", "train", "compare"))
    return PipelineRun(cfg, out, report, time.perf_counter() - start)


@pytest.fixture(scope="session")
def rlc_run(tmp_path_factory):
    """Full RLC pipeline with the shipped config (several minutes)."""
    return _run("rlc", tmp_path_factory)


@pytest.fixture(scope="session")
def cstr_run(tmp_path_factory):
    """Full CSTR pipeline with the shipped config (several minutes)."""
    return _run("cstr", tmp_path_factory)


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_log

    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(acceptance_log.RESULTS, key=str):
            ok, detail = acceptance_log.RESULTS[key]
            terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
