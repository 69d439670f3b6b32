import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from rnnxfer.adaptation import (
    RlsState,
    conjugate_gradient_solve,
    ekf_adapt,
    gp_predict,
    jfr_fit,
    jfr_predict,
    lm_jfr_fit,
    ntk_gram,
    regression_target,
    rls_fit,
    rls_stream,
    rls_update,
)
from rnnxfer.jacobians import Linearization
from rnnxfer.model import ModelArch, Sequence, StateSpaceModel, simulate

from .conftest import random_problem


def adaptation_problem(seed=0, N=40, arch=None):
    """Nominal model plus transfer data from a perturbed copy of it."""
    arch = arch or ModelArch("mlp_ss", 1, 1, 2, 5, readout="linear")
    model, theta, u, x0 = random_problem(arch, seed, N=N)
    rng = np.random.default_rng(seed + 1)
    theta_true = theta.values + 0.05 * rng.standard_normal(model.n_theta)
    y, _ = simulate(model, u, x0, theta_true)
    return model, theta, Sequence(u, y, 1.0), x0


class TestJfrFit:
    def test_identity_features(self):
        post = jfr_fit(np.eye(2), [1.0, 2.0], 0.5)
        np.testing.assert_allclose(post.mean, [1 / 1.5, 2 / 1.5], rtol=1e-14)

    def test_single_feature(self):
        post = jfr_fit(np.array([[1.0], [1.0]]), [1.0, 3.0], 1.0, want_cov=True)
        assert post.mean[0] == pytest.approx(4.0 / 3.0, rel=1e-14)
        assert post.cov[0, 0] == pytest.approx(1.0 / 3.0, rel=1e-14)

    def test_large_prior_noise_shrinks_to_zero(self):
        rng = np.random.default_rng(0)
        post = jfr_fit(rng.standard_normal((10, 3)), rng.standard_normal(10), 1e12)
        assert np.abs(post.mean).max() < 1e-10

    def test_matches_lstsq_ridge(self):
        rng = np.random.default_rng(1)
        J, y = rng.standard_normal((30, 6)), rng.standard_normal(30)
        post = jfr_fit(J, y, 0.1)
        aug = np.vstack([J, np.sqrt(0.1) * np.eye(6)])
        ref = np.linalg.lstsq(aug, np.concatenate([y, np.zeros(6)]), rcond=None)[0]
        np.testing.assert_allclose(post.mean, ref, rtol=1e-10)

    @pytest.mark.parametrize("sigma2", [1e-4, 1e-2, 1.0])
    def test_covariance_symmetric_positive_definite(self, sigma2):
        J = np.random.default_rng(2).standard_normal((20, 30))
        cov = jfr_fit(J, np.zeros(20), sigma2, want_cov=True).cov
        np.testing.assert_array_equal(cov, cov.T)
        linalg.cholesky(cov)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            jfr_fit(np.eye(2), [1.0, 2.0], 0.0)
        with pytest.raises(ValueError):
            jfr_fit(np.eye(2), [1.0, 2.0, 3.0], 1.0)
        with pytest.raises(linalg.LinAlgError):
            jfr_fit(np.array([[np.nan, 1.0]]), [1.0], 1.0)

    def test_ridge_norm_decreases_with_sigma2(self):
        rng = np.random.default_rng(3)
        J, y = rng.standard_normal((15, 8)), rng.standard_normal(15)
        norms = [np.linalg.norm(jfr_fit(J, y, s).mean) for s in (1e-3, 1e-2, 1e-1, 1.0, 10.0)]
        assert np.all(np.diff(norms) < 0)


class TestJfrPredict:
    def test_zero_correction_gives_nominal(self):
        model, theta, xf, x0 = adaptation_problem()
        lin = Linearization(model, theta, xf.u, x0)
        post = jfr_fit(lin.jacobian(), np.zeros(lin.n_rows), 1e-2, want_cov=True)
        mean, var = jfr_predict(model, theta, post, xf.u, x0, want_var=True)
        np.testing.assert_allclose(mean, lin.outputs(), atol=1e-14)
        assert np.all(var >= 0)

    def test_residual_and_raw_bookkeeping(self):
        model, theta, xf, x0 = adaptation_problem()
        lin = Linearization(model, theta, xf.u, x0)
        J = lin.jacobian()
        res = jfr_fit(J, regression_target(lin, xf.y, "residual"), 1e-2, mode="residual")
        raw = jfr_fit(J, regression_target(lin, xf.y, "raw"), 1e-2, mode="raw")
        m_res, _ = jfr_predict(model, theta, res, xf.u, x0)
        m_raw, _ = jfr_predict(model, theta, raw, xf.u, x0)
        np.testing.assert_allclose(m_res, J @ res.mean + lin.outputs(), rtol=1e-12)
        np.testing.assert_allclose(m_raw, J @ raw.mean, rtol=1e-12)

    def test_adaptation_reduces_error(self):
        model, theta, xf, x0 = adaptation_problem(N=60)
        lin = Linearization(model, theta, xf.u, x0)
        post = jfr_fit(lin.jacobian(), regression_target(lin, xf.y), 1e-4)
        mean, _ = jfr_predict(model, theta, post, xf.u, x0)
        y = xf.y.reshape(-1)
        assert np.linalg.norm(mean - y) < 0.5 * np.linalg.norm(lin.outputs() - y)

    def test_unknown_mode(self):
        model, theta, xf, x0 = adaptation_problem()
        lin = Linearization(model, theta, xf.u, x0)
        with pytest.raises(ValueError):
            regression_target(lin, xf.y, "delta")


class TestConjugateGradient:
    def test_identity_one_iteration(self):
        b = np.array([1.0, -2.0, 3.0])
        x, iters, ok = conjugate_gradient_solve(lambda v: v, b)
        np.testing.assert_allclose(x, b)
        assert iters == 1 and ok

    def test_spd_system(self):
        rng = np.random.default_rng(0)
        M = rng.standard_normal((5, 5))
        A = M @ M.T + 5 * np.eye(5)
        b = rng.standard_normal(5)
        x, _, ok = conjugate_gradient_solve(lambda v: A @ v, b, tol=1e-14)
        assert ok
        np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-9)

    def test_zero_rhs(self):
        x, iters, ok = conjugate_gradient_solve(lambda v: 2 * v, np.zeros(4))
        assert iters == 0 and ok and not x.any()

    def test_non_convergence_reported(self):
        A = np.diag(np.logspace(0, 8, 50))
        _, iters, ok = conjugate_gradient_solve(lambda v: A @ v, np.ones(50), tol=1e-14, max_iters=3)
        assert iters == 3 and not ok

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 12), seed=st.integers(0, 1000))
    def test_solves_random_spd(self, n, seed):
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((n, n))
        A = M @ M.T + np.eye(n)
        b = rng.standard_normal(n)
        x, _, ok = conjugate_gradient_solve(lambda v: A @ v, b, tol=1e-12)
        assert ok
        assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b) * 10


class TestLmJfr:
    def test_zero_target_gives_zero(self):
        model, theta, xf, x0 = adaptation_problem()
        lin = Linearization(model, theta, xf.u, x0)
        res = lm_jfr_fit(model, theta, Sequence(xf.u, lin.y, 1.0), x0, sigma2=1e-2)
        assert res.iterations == 0 and not res.mean.any()

    def test_matches_cholesky(self):
        model, theta, xf, x0 = adaptation_problem()
        lin = Linearization(model, theta, xf.u, x0)
        ref = jfr_fit(lin.jacobian(), regression_target(lin, xf.y), 1e-2)
        res = lm_jfr_fit(model, theta, xf, x0, sigma2=1e-2, tol=1e-12, max_iters=5000)
        assert res.converged
        assert np.abs(res.mean - ref.mean).max() <= 1e-6 * np.abs(ref.mean).max()

    def test_warns_when_budget_exhausted(self):
        model, theta, xf, x0 = adaptation_problem()
        with pytest.warns(RuntimeWarning):
            res = lm_jfr_fit(model, theta, xf, x0, sigma2=1e-4, tol=1e-14, max_iters=2)
        assert not res.converged


class TestRls:
    def test_zero_row_leaves_state(self):
        s0 = RlsState.initial(3, 0.1)
        s1 = rls_update(s0, np.zeros(3), 5.0)
        np.testing.assert_array_equal(s1.theta, s0.theta)
        np.testing.assert_array_equal(s1.P, s0.P)

    def test_one_step_closed_form(self):
        # prior N(0, I), one scalar observation: mean = r y / (sigma2 + |r|^2)
        r, y, s2 = np.array([1.0, 2.0]), 3.0, 0.5
        s1 = rls_update(RlsState.initial(2, s2), r, y)
        np.testing.assert_allclose(s1.theta, r * y / (s2 + r @ r), rtol=1e-14)
        np.testing.assert_allclose(s1.P, np.eye(2) - np.outer(r, r) / (s2 + r @ r), rtol=1e-14)

    def test_batch_equivalence(self):
        rng = np.random.default_rng(0)
        J, y = rng.standard_normal((60, 10)), rng.standard_normal(60)
        state = rls_fit(J, y, 1e-2)
        post = jfr_fit(J, y, 1e-2, want_cov=True)
        assert np.abs(state.theta - post.mean).max() <= 1e-6 * np.abs(post.mean).max()
        # with a unit prior P is the posterior covariance itself
        np.testing.assert_allclose(state.P, post.cov, atol=1e-10)

    def test_stream_matches_batch(self):
        model, theta, xf, x0 = adaptation_problem(N=30)
        lin = Linearization(model, theta, xf.u, x0)
        target = regression_target(lin, xf.y)
        state = rls_stream(lin, target, 1e-2)
        ref = jfr_fit(lin.jacobian(), target, 1e-2)
        assert np.abs(state.theta - ref.mean).max() <= 1e-6 * np.abs(ref.mean).max()

    def test_rejects_non_finite_row(self):
        with pytest.raises(ValueError):
            rls_update(RlsState.initial(2, 1.0), np.array([np.inf, 0.0]), 1.0)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(1, 6), m=st.integers(1, 25), seed=st.integers(0, 1000),
           log_s2=st.floats(-3, 1))
    def test_batch_equivalence_property(self, n, m, seed, log_s2):
        rng = np.random.default_rng(seed)
        J, y = rng.standard_normal((m, n)), rng.standard_normal(m)
        s2 = 10.0 ** log_s2
        ref = jfr_fit(J, y, s2).mean
        got = rls_fit(J, y, s2).theta
        assert np.abs(got - ref).max() <= 1e-6 * max(np.abs(ref).max(), 1.0)


class TestGram:
    def test_symmetric_psd_and_explicit(self):
        model, theta, xf, x0 = adaptation_problem(N=20)
        gram = ntk_gram(model, theta, xf.u, x0)
        J = Linearization(model, theta, xf.u, x0).jacobian()
        np.testing.assert_array_equal(gram.K, gram.K.T)
        np.testing.assert_allclose(gram.K, J @ J.T, rtol=1e-12, atol=1e-12)
        assert np.linalg.eigvalsh(gram.K).min() >= -1e-10 * np.abs(gram.K).max()

    def test_matrix_free_equals_explicit(self):
        model, theta, xf, x0 = adaptation_problem(N=20)
        explicit = ntk_gram(model, theta, xf.u, x0)
        free = ntk_gram(model, theta, xf.u, x0, max_entries=0)
        assert free.J is None
        np.testing.assert_allclose(free.K, explicit.K, rtol=1e-10, atol=1e-12)


class TestGp:
    def _setup(self, arch=None):
        model, theta, xf, x0 = adaptation_problem(N=30, arch=arch)
        rng = np.random.default_rng(9)
        u_new = rng.standard_normal((25, model.arch.n_u))
        return model, theta, xf, x0, u_new

    @pytest.mark.parametrize("arch", [None, ModelArch("lstm", 1, 2, 6, 3, output_feedback=True)])
    def test_mean_equals_jfr(self, arch):
        model, theta, xf, x0, u_new = self._setup(arch)
        lin = Linearization(model, theta, xf.u, x0)
        post = jfr_fit(lin.jacobian(), regression_target(lin, xf.y), 1e-2, want_cov=True)
        m_jfr, v_jfr = jfr_predict(model, theta, post, u_new, x0, want_var=True)
        gram = ntk_gram(model, theta, xf.u, x0, lin=lin)
        gp = gp_predict(model, theta, gram, xf.y, 1e-2, u_new, x0, solver="direct", want_var=True)
        scale = np.abs(m_jfr).max()
        assert np.abs(gp.mean - m_jfr).max() <= 1e-6 * scale
        # sigma2 (J^T J + sigma2 I)^-1 = I - J^T (J J^T + sigma2 I)^-1 J, so the variances agree
        np.testing.assert_allclose(gp.var, v_jfr, rtol=1e-6, atol=1e-12)

    def test_cg_matches_direct(self):
        model, theta, xf, x0, u_new = self._setup()
        gram = ntk_gram(model, theta, xf.u, x0)
        a = gp_predict(model, theta, gram, xf.y, 1e-2, u_new, x0, solver="direct")
        b = gp_predict(model, theta, gram, xf.y, 1e-2, u_new, x0, tol=1e-12)
        assert b.converged
        np.testing.assert_allclose(b.mean, a.mean, rtol=1e-8, atol=1e-10)

    def test_zero_residual_gives_nominal(self):
        model, theta, xf, x0, u_new = self._setup()
        lin = Linearization(model, theta, xf.u, x0)
        gram = ntk_gram(model, theta, xf.u, x0, lin=lin)
        gp = gp_predict(model, theta, gram, lin.y, 1e-2, u_new, x0)
        nominal = Linearization(model, theta, u_new, x0).outputs()
        np.testing.assert_allclose(gp.mean, nominal, atol=1e-14)

    def test_large_noise_returns_nominal(self):
        model, theta, xf, x0, u_new = self._setup()
        gram = ntk_gram(model, theta, xf.u, x0)
        gp = gp_predict(model, theta, gram, xf.y, 1e12, u_new, x0, solver="direct")
        nominal = Linearization(model, theta, u_new, x0).outputs()
        np.testing.assert_allclose(gp.mean, nominal, atol=1e-9)

    def test_variance_non_negative(self):
        model, theta, xf, x0, u_new = self._setup()
        gram = ntk_gram(model, theta, xf.u, x0)
        gp = gp_predict(model, theta, gram, xf.y, 1e-4, u_new, x0, want_var=True)
        assert np.all(gp.var >= 0)

    def test_invalid(self):
        model, theta, xf, x0, u_new = self._setup()
        gram = ntk_gram(model, theta, xf.u, x0)
        with pytest.raises(ValueError):
            gp_predict(model, theta, gram, xf.y, 0.0, u_new, x0)
        with pytest.raises(ValueError):
            gp_predict(model, theta, gram, xf.y, 1.0, u_new, x0, mode="other")


def scalar_gain_problem(n, seed, gain=2.0, noise=0.05):
    """x_{k+1} = 0.5 x_k + gain u_k observed with white noise."""
    arch = ModelArch("linear", 1, 1, 1, 1)
    model = StateSpaceModel(arch)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n, 1))
    truth = np.array([0.5, gain])
    y, _ = simulate(model, u, None, truth)
    y = y + noise * rng.standard_normal(y.shape)
    return model, Sequence(u, y, 1.0), truth


class TestEkf:
    def test_frozen_parameters_stay_constant(self):
        model, stream, _ = scalar_gain_problem(100, 0)
        theta0 = np.array([0.4, 1.5])
        res = ekf_adapt(model, theta0, stream, q_theta=0.0, p0_theta=0.0, r=0.05**2)
        np.testing.assert_array_equal(res.theta, theta0)
        np.testing.assert_array_equal(res.theta_traj[-1], theta0)

    def test_converges_to_least_squares(self):
        model, stream, truth = scalar_gain_problem(500, 1)
        res = ekf_adapt(model, np.array([0.5, 1.0]), stream, q_theta=0.0, p0_theta=1.0, r=0.05**2)
        # least squares for the gain with the pole known, using the noisy outputs
        y = stream.y[:, 0]
        reg = stream.u[:-1, 0]
        target = y[1:] - 0.5 * y[:-1]
        b_ls = reg @ target / (reg @ reg)
        se = 0.05 * np.sqrt(1.25) / np.sqrt(reg @ reg)
        assert abs(res.theta[1] - b_ls) < 3 * se + 1e-2
        assert abs(res.theta[1] - truth[1]) < 0.05

    def test_outputs_and_shapes(self):
        model, stream, _ = scalar_gain_problem(50, 2)
        res = ekf_adapt(model, np.array([0.3, 1.0]), stream, r=0.01)
        assert res.theta_traj.shape == (50, 2)
        assert res.y_filter.shape == (50, 1) and res.y_hat.shape == (50, 1)
        assert res.floored == 0

    def test_rejects_non_positive_noise(self):
        model, stream, _ = scalar_gain_problem(10, 0)
        with pytest.raises(ValueError):
            ekf_adapt(model, np.array([0.5, 1.0]), stream, r=0.0)
