import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emvamp.lmmse import (THETA2_MAX, LmmseWorkspace, SingularSystemError, em_update_theta2,
                          iterate_theta2, lmmse_direct, lmmse_svd)
from emvamp.problem import MatrixSpec, SvdMatrix, build_matrix

from oracles import bisect, gaussian_moments_quad


def scalar_ws(y=3.0):
    A = SvdMatrix(U=np.eye(1), V=np.eye(1), s=np.ones(1))
    return A, LmmseWorkspace(A, np.array([y]))


def random_case(rng, kappa):
    M, N = (int(v) for v in rng.integers(2, 65, size=2))
    A = build_matrix(MatrixSpec(M, N, kappa, seed=int(rng.integers(2**31))))
    y = rng.normal(size=M)
    r2 = rng.normal(size=N)
    return A, y, r2, 10 ** rng.uniform(-2, 2), 10 ** rng.uniform(-2, 3)


def rel(a, b):
    return np.linalg.norm(np.subtract(a, b)) / max(np.linalg.norm(b), 1e-300)


class TestDirect:
    def test_identity(self):
        y, r2 = np.array([1.0, -2.0, 3.0]), np.array([0.5, 0.5, 0.0])
        out = lmmse_direct(np.eye(3), y, r2, 1.0, 1.0)
        np.testing.assert_allclose(out.xhat, (y + r2) / 2, rtol=1e-15)
        assert out.eta == pytest.approx(2.0, rel=1e-15)

    def test_no_data_term(self):
        rng = np.random.default_rng(0)
        A, r2 = rng.normal(size=(4, 6)), rng.normal(size=6)
        out = lmmse_direct(A, rng.normal(size=4), r2, 3.0, 0.0)
        np.testing.assert_allclose(out.xhat, r2, rtol=1e-14)
        assert out.eta == pytest.approx(3.0, rel=1e-14)
        assert out.resid_energy == pytest.approx(out.resid_energy_r2, rel=1e-14)

    def test_scalar(self):
        out = lmmse_direct(np.ones((1, 1)), np.array([3.0]), np.array([1.0]), 1.0, 1.0)
        assert out.xhat[0] == pytest.approx(2.0, rel=1e-15)
        assert out.eta == pytest.approx(2.0, rel=1e-15)
        assert out.resid_energy == pytest.approx(1.5, rel=1e-15)

    def test_scalar_against_quadrature(self):
        # b2(x) ∝ exp(-1/2 (3 - x)^2 - 1/2 (x - 1)^2)
        logb = lambda x: -0.5 * (3 - x) ** 2 - 0.5 * (x - 1) ** 2
        _, m, v = gaussian_moments_quad(logb, 2.0, 1.0)
        assert m == pytest.approx(2.0, rel=1e-10)
        assert (3 - m) ** 2 + v == pytest.approx(1.5, rel=1e-10)

    def test_singular(self):
        with pytest.raises(SingularSystemError, match="min eigenvalue"):
            lmmse_direct(np.ones((1, 3)), np.ones(1), np.zeros(3), 0.0, 1.0)


class TestSvd:
    def test_flat_spectrum(self):
        A = build_matrix(MatrixSpec(5, 5, 1.0, seed=3))
        ws = LmmseWorkspace(A, np.ones(5))
        assert lmmse_svd(ws, np.zeros(5), 1.0, 1.0).eta == pytest.approx(2.0, rel=1e-14)

    def test_nullspace_completion(self):
        A = build_matrix(MatrixSpec(3, 7, 4.0, seed=1))
        ws = LmmseWorkspace(A, np.ones(3))
        theta2 = 17.0
        out = lmmse_svd(ws, np.zeros(7), 1.0, theta2)
        trace_Qinv = 7 / out.eta
        assert trace_Qinv == pytest.approx(np.sum(1 / (theta2 * A.s**2 + 1)) + 4, rel=1e-14)

    def test_workspace_projection_norm(self):
        A = build_matrix(MatrixSpec(9, 4, 3.0, seed=2))
        y = np.arange(9.0)
        ws = LmmseWorkspace(A, y)
        assert np.linalg.norm(ws.ytil) == pytest.approx(np.linalg.norm(y), rel=1e-10)
        assert ws.tail_sq > 0

    def test_singular_nullspace(self):
        A = build_matrix(MatrixSpec(2, 4, 1.0, seed=0))
        with pytest.raises(SingularSystemError):
            lmmse_svd(LmmseWorkspace(A, np.ones(2)), np.zeros(4), 0.0, 1.0)

    @pytest.mark.parametrize("kappa", [1.0, 10.0, 1e3])
    def test_matches_dense(self, kappa):
        rng = np.random.default_rng(int(kappa))
        for _ in range(15):
            A, y, r2, g2, th2 = random_case(rng, kappa)
            a = lmmse_svd(LmmseWorkspace(A, y), r2, g2, th2)
            b = lmmse_direct(A.dense, y, r2, g2, th2)
            assert rel(a.xhat, b.xhat) <= 1e-10
            assert abs(a.eta - b.eta) / b.eta <= 1e-10
            assert abs(a.trace - b.trace) / b.trace <= 1e-10
            assert abs(a.resid_energy - b.resid_energy) / b.resid_energy <= 1e-10
            assert abs(a.resid_energy_r2 - b.resid_energy_r2) / b.resid_energy_r2 <= 1e-10

    @given(seed=st.integers(0, 2**31), lg=st.floats(-3, 3), lt=st.floats(-3, 6))
    @settings(max_examples=60, deadline=None)
    def test_eta_at_least_gamma2(self, seed, lg, lt):
        rng = np.random.default_rng(seed)
        M, N = (int(v) for v in rng.integers(1, 30, size=2))
        cond = float(10 ** rng.uniform(0, 3)) if min(M, N) > 1 else 1.0
        A = build_matrix(MatrixSpec(M, N, cond, seed=seed))
        ws = LmmseWorkspace(A, rng.normal(size=A.M))
        g2 = 10**lg
        out = lmmse_svd(ws, rng.normal(size=A.N), g2, 10**lt)
        assert out.eta >= g2 * (1 - 1e-12)
        assert out.resid_energy >= 0

    def test_trace_identity(self):
        A = build_matrix(MatrixSpec(12, 20, 100.0, seed=4))
        ws = LmmseWorkspace(A, np.ones(12))
        D = A.dense
        Q = 3.0 * D.T @ D + 0.2 * np.eye(20)
        dense = np.trace(D @ np.linalg.inv(Q) @ D.T)
        assert ws.trace_AQinvAT(0.2, 3.0) == pytest.approx(dense, rel=1e-10)


class TestTheta2:
    def test_scalar_step(self):
        _, ws = scalar_ws()
        assert em_update_theta2(ws, np.array([1.0]), 1.0, 1.0) == pytest.approx(2 / 9, rel=1e-15)

    def test_scalar_step_posterior_mean(self):
        # E||y - Ax||^2 = (3 - 2)^2 + 1/2
        _, ws = scalar_ws()
        val = em_update_theta2(ws, np.array([1.0]), 1.0, 1.0, residual="posterior_mean")
        assert val == pytest.approx(1 / 1.5, rel=1e-15)

    def test_normalization(self):
        A = build_matrix(MatrixSpec(6, 10, 2.0, seed=0))
        ws = LmmseWorkspace(A, np.arange(6.0))
        r2 = np.ones(10)
        n = em_update_theta2(ws, r2, 1.0, 2.0, normalization="paper_N")
        m = em_update_theta2(ws, r2, 1.0, 2.0, normalization="ml_M")
        assert m / n == pytest.approx(6 / 10, rel=1e-14)

    def test_clamp_noiseless(self):
        A = build_matrix(MatrixSpec(4, 4, 1.0, seed=0))
        r2 = np.array([1.0, -1.0, 2.0, 0.0])
        ws = LmmseWorkspace(A, A.matvec(r2))
        assert em_update_theta2(ws, r2, 1e30, 1.0) == THETA2_MAX

    def test_mode_validation(self):
        _, ws = scalar_ws()
        with pytest.raises(ValueError):
            em_update_theta2(ws, np.ones(1), 1.0, 1.0, residual="bogus")
        with pytest.raises(ValueError):
            em_update_theta2(ws, np.ones(1), 1.0, 1.0, normalization="bogus")
        with pytest.raises(ValueError):
            em_update_theta2(ws, np.ones(1), 1.0, -1.0)

    def test_scalar_fixed_point(self):
        # theta^-1 = 4 + 1/(theta + 1)  <=>  4 theta^2 + 4 theta - 1 = 0
        root = bisect(lambda t: 1 / t - 4 - 1 / (t + 1), 1e-3, 10.0)
        assert root == pytest.approx((np.sqrt(2) - 1) / 2, rel=1e-12)
        assert root == pytest.approx(0.20710678, abs=1e-8)
        _, ws = scalar_ws()
        res = iterate_theta2(ws, np.array([1.0]), 1.0, 1.0, tol=1e-13, max_inner=200)
        assert res.converged
        assert res.theta2 == pytest.approx(root, rel=1e-11)

    def test_scalar_monotone(self):
        _, ws = scalar_ws()
        th, seq = 1.0, [1.0]
        for _ in range(20):
            th = em_update_theta2(ws, np.array([1.0]), 1.0, th)
            seq.append(th)
        assert np.all(np.diff(seq) <= 0) and seq[-1] > 0

    def test_stationary_in_one_pass(self):
        _, ws = scalar_ws()
        root = (np.sqrt(2) - 1) / 2
        res = iterate_theta2(ws, np.array([1.0]), 1.0, root)
        assert res.n_iter == 1 and res.converged

    def test_nonconvergence_flag(self):
        _, ws = scalar_ws()
        res = iterate_theta2(ws, np.array([1.0]), 1.0, 1.0, tol=1e-15, max_inner=2)
        assert not res.converged and res.n_iter == 2
        with pytest.raises(ValueError):
            iterate_theta2(ws, np.array([1.0]), 1.0, 1.0, tol=0.0)
