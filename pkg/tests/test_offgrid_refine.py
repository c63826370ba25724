import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from offgrid_sbl.array_model import ArrayGeometry
from offgrid_sbl.baselines import ongrid_sbl_estimate
from offgrid_sbl.channel_sim import nmse, noise_variance
from offgrid_sbl.offgrid_refine import (
    RefineConfig,
    beta_gradient,
    beta_step_fixed,
    beta_step_linesearch,
    estimate_offgrid_2d,
    estimate_offgrid_linear,
    phi_gradient,
    phi_step,
    phi_step_size,
    surrogate_objective,
    write_trace,
)
from offgrid_sbl.sbl_core import (
    GAMMA_MAX,
    NumericalError,
    OffGridDictionary,
    SblState,
    compute_posterior,
    initial_state,
)

from conftest import crandn, random_geometry


def random_state(rng, dic, X, y, planar=False):
    L = dic.n_grid
    beta = rng.uniform(-0.4, 0.4, L) * dic.r_theta
    phi = rng.uniform(0.1, 1.4, L) if planar else None
    _, Phi = dic.assemble(X, beta, phi)
    alpha = float(rng.uniform(1.0, 10.0))
    gamma = np.exp(rng.uniform(-2, 2, L))
    post = compute_posterior(y, Phi, alpha, gamma)
    return SblState(alpha=alpha, gamma=gamma, beta=beta, mu=post.mu, sigma=post.sigma, phi_hat=phi)


def surrogate_at(state, y, X, dic, beta=None, phi=None):
    beta = state.beta if beta is None else beta
    phi = state.phi_hat if phi is None else phi
    _, Phi = dic.assemble(X, beta, phi)
    return surrogate_objective(y, Phi, state.mu, state.sigma, state.alpha)


def fd_gradient(f, x, h=1e-6):
    g = np.empty_like(x)
    for l in range(x.size):
        e = np.zeros_like(x)
        e[l] = h
        g[l] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestConfig:
    @pytest.mark.parametrize("rho", [0.0, 1.0, -0.5, 1.5])
    def test_rho_range(self, rho):
        with pytest.raises(ValueError, match="rho"):
            RefineConfig(rho=rho)

    def test_other_validation(self):
        for kw in ({"max_iters": 0}, {"step_mode": "newton"}, {"beta_clip": 0.0},
                   {"ls_shrink": 1.0}, {"phi_init": "magic"}, {"support_threshold": 0.0}):
            with pytest.raises(ValueError):
                RefineConfig(**kw)

    def test_defaults(self):
        cfg = RefineConfig()
        assert cfg.step_mode == "fixed" and cfg.max_iters == 200 and cfg.evidence_tol == 1e-6
        assert cfg.beta_clip == 0.5


class TestGradients:
    def test_zero_posterior_gives_zero_gradient(self, rng):
        dic = OffGridDictionary.uniform(ArrayGeometry.ula(8, 0.5), 1.0, 10)
        X = crandn(rng, 5, 8)
        st_ = replace(initial_state(10), sigma=np.zeros((10, 10), complex))
        assert np.all(beta_gradient(st_, crandn(rng, 5), X, dic) == 0)

    def test_beta_matches_finite_difference(self, rng):
        dic = OffGridDictionary.uniform(ArrayGeometry.ula(16, 0.5), 1.0, 24)
        for _ in range(20):
            X = crandn(rng, 10, 16)
            y = crandn(rng, 10)
            st_ = random_state(rng, dic, X, y)
            fd = fd_gradient(lambda b: surrogate_at(st_, y, X, dic, beta=b), st_.beta)
            assert rel_err(beta_gradient(st_, y, X, dic), fd) < 1e-5

    def test_beta_matches_finite_difference_planar(self, rng):
        g = random_geometry(rng, 16, extent=1.5)
        dic = OffGridDictionary.uniform(g, 1.0, 24, (-math.pi, math.pi))
        for _ in range(20):
            X = crandn(rng, 10, 16)
            y = crandn(rng, 10)
            st_ = random_state(rng, dic, X, y, planar=True)
            fd = fd_gradient(lambda b: surrogate_at(st_, y, X, dic, beta=b), st_.beta)
            assert rel_err(beta_gradient(st_, y, X, dic), fd) < 1e-5

    def test_phi_matches_finite_difference(self, rng):
        g = random_geometry(rng, 16, extent=1.5)
        dic = OffGridDictionary.uniform(g, 1.0, 24, (-math.pi, math.pi))
        for _ in range(20):
            X = crandn(rng, 10, 16)
            y = crandn(rng, 10)
            st_ = random_state(rng, dic, X, y, planar=True)
            fd = fd_gradient(lambda p: surrogate_at(st_, y, X, dic, phi=p), st_.phi_hat)
            assert rel_err(phi_gradient(st_, y, X, dic), fd) < 1e-5

    def test_component_loop_oracle(self, rng):
        # per-column form 2 alpha Re(dPhi_l^H [conj(mu_l) r - (Phi Sigma)_l])
        dic = OffGridDictionary.uniform(ArrayGeometry.ula(8, 0.5), 1.0, 6)
        X = crandn(rng, 5, 8)
        y = crandn(rng, 5)
        st_ = random_state(rng, dic, X, y)
        _, Phi = dic.assemble(X, st_.beta)
        dPhi = X @ dic.deriv_theta(st_.beta)
        r = y - Phi @ st_.mu
        ref = [2 * st_.alpha * np.real(np.vdot(dPhi[:, l], np.conj(st_.mu[l]) * r - Phi @ st_.sigma[:, l]))
               for l in range(6)]
        assert np.allclose(beta_gradient(st_, y, X, dic), ref, rtol=1e-12, atol=1e-12)

    def test_stale_posterior_rejected(self, rng):
        dic = OffGridDictionary.uniform(ArrayGeometry.ula(8, 0.5), 1.0, 10)
        with pytest.raises(ValueError, match="stale"):
            beta_gradient(initial_state(7), crandn(rng, 5), crandn(rng, 5, 8), dic)

    def test_phi_gradient_needs_elevations(self, rng):
        dic = OffGridDictionary.uniform(ArrayGeometry.ula(8, 0.5), 1.0, 4)
        with pytest.raises(ValueError):
            phi_gradient(initial_state(4), crandn(rng, 5), crandn(rng, 5, 8), dic)

    def test_sign_points_toward_true_angle(self, rng):
        N, L = 16, 24
        dic = OffGridDictionary.uniform(ArrayGeometry.ula(N, 0.5), 1.0, L)
        X = crandn(rng, 12, N)
        k = 11
        h = dic.steering()[:, k]
        y = X @ h
        gamma = np.full(L, GAMMA_MAX)
        gamma[k] = 1.0
        for off in (0.2, -0.2):
            beta = np.zeros(L)
            beta[k] = off * dic.r_theta
            _, Phi = dic.assemble(X, beta)
            post = compute_posterior(y, Phi, 100.0, gamma)
            st_ = SblState(alpha=100.0, gamma=gamma, beta=beta, mu=post.mu, sigma=post.sigma)
            assert np.sign(beta_gradient(st_, y, X, dic)[k]) == -np.sign(off)


class TestSteps:
    def test_fixed_step(self):
        st_ = replace(initial_state(4), gamma=np.array([1.0, 1.0, 1.0, GAMMA_MAX]))
        r = 0.1
        beta = beta_step_fixed(st_, np.array([2.0, -3.0, 0.0, 5.0]), r)
        assert np.allclose(beta, [r / 100, -r / 100, 0.0, 0.0])

    def test_zero_gradient_keeps_beta(self):
        st_ = replace(initial_state(3), beta=np.array([0.01, -0.02, 0.0]))
        assert np.array_equal(beta_step_fixed(st_, np.zeros(3), 0.1), st_.beta)
        res = beta_step_linesearch(st_, np.zeros(3), lambda b: 0.0, 0.1)
        assert np.array_equal(res.x, st_.beta) and not res.stalled

    def test_fixed_step_clipped(self):
        st_ = replace(initial_state(2), beta=np.array([0.0499, -0.0499]))
        beta = beta_step_fixed(st_, np.array([1.0, -1.0]), 0.1)
        assert np.allclose(beta, [0.05, -0.05])

    def test_fixed_step_respects_explicit_limits(self):
        st_ = replace(initial_state(3), beta=np.array([0.0199, -0.0299, 0.0]))
        lo, hi = np.array([-0.01, -0.03, -0.05]), np.array([0.02, 0.01, 0.05])
        beta = beta_step_fixed(st_, np.array([1.0, -1.0, 1.0]), 0.1, limits=(lo, hi))
        assert np.allclose(beta, [0.02, -0.03, 0.001])
        res = beta_step_linesearch(st_, np.array([1.0, -1.0, 0.0]), lambda b: float(b[0] - b[1]), 0.1,
                                   limits=(lo, hi))
        assert np.all(res.x >= lo) and np.all(res.x <= hi)

    def test_refined_angles_never_cross(self):
        rng = np.random.default_rng(11)
        g = ArrayGeometry.ula(24, 0.54)
        dic = OffGridDictionary.spatial_frequency(g, 1.0, 60, 0.54)
        from offgrid_sbl.array_model import steering_linear
        h = steering_linear(g, rng.uniform(-0.3, 0.3, 4), 1.0) @ crandn(rng, 4)
        X = crandn(rng, 16, 24)
        y = X @ h + 0.1 * crandn(rng, 16)
        est = estimate_offgrid_linear(y, X, dic, cfg=RefineConfig(max_iters=80))
        assert np.all(np.diff(dic.angles(est.state.beta)) >= -1e-15)

    def test_linesearch_never_decreases_surrogate(self, rng):
        dic = OffGridDictionary.uniform(ArrayGeometry.ula(12, 0.5), 1.0, 16)
        cfg = RefineConfig(step_mode="line_search")
        for _ in range(50):
            X = crandn(rng, 8, 12)
            y = crandn(rng, 8)
            st_ = random_state(rng, dic, X, y)
            f = lambda b: surrogate_at(st_, y, X, dic, beta=b)  # noqa: E731
            zeta = beta_gradient(st_, y, X, dic)
            res = beta_step_linesearch(st_, zeta, f, dic.r_theta, cfg)
            assert f(res.x) >= f(st_.beta)
            assert np.all(np.abs(res.x) <= cfg.beta_clip * dic.r_theta + 1e-15)

    def test_armijo_condition_holds(self):
        # concave bowl centred at c
        c = np.array([0.02, -0.01, 0.03])
        f = lambda b: -float(np.sum((b - c) ** 2)) * 1e3  # noqa: E731
        st_ = initial_state(3)
        zeta = -2e3 * (st_.beta - c)
        cfg = RefineConfig(step_mode="line_search")
        res = beta_step_linesearch(st_, zeta, f, 0.1, cfg)
        assert not res.stalled
        assert f(res.x) >= f(st_.beta) + cfg.ls_c * float(zeta @ (res.x - st_.beta))

    def test_linesearch_stalls_on_ascent_free_direction(self):
        f = lambda b: -float(np.sum(b ** 2)) - 1.0 * float(np.any(b != 0))  # noqa: E731
        res = beta_step_linesearch(initial_state(2), np.array([1.0, 1.0]), f, 0.1)
        assert res.stalled and np.array_equal(res.x, np.zeros(2))

    def test_phi_step_schedule(self):
        assert math.isclose(phi_step_size(0, 0.95), math.pi / 36)
        assert math.isclose(phi_step_size(10_000, 0.95), math.pi / 36 * 1e-3)

    def test_phi_step_moves_and_clamps(self):
        st_ = replace(initial_state(3), phi_hat=np.array([math.pi / 2, 0.3, 0.0]))
        phi = phi_step(st_, np.array([1.0, 0.0, -1.0]), 0)
        assert np.allclose(phi, [math.pi / 2, 0.3, 0.0])
        phi = phi_step(st_, np.array([-1.0, 1.0, 1.0]), 0)
        assert np.allclose(phi, [math.pi / 2 - math.pi / 36, 0.3 + math.pi / 36, math.pi / 36])

    @given(st.integers(0, 10_000), st.floats(0.01, 0.99))
    def test_phi_step_stays_in_range(self, seed, rho):
        rng = np.random.default_rng(seed)
        st_ = replace(initial_state(8), phi_hat=rng.uniform(0, math.pi / 2, 8))
        phi = phi_step(st_, rng.standard_normal(8), int(rng.integers(0, 300)), RefineConfig(rho=rho))
        assert np.all((phi >= 0) & (phi <= math.pi / 2))


class TestEstimator:
    def test_on_grid_single_path_high_snr(self):
        errs = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            g = ArrayGeometry.ula(64, 0.5)
            dic = OffGridDictionary.spatial_frequency(g, 1.0, 90, 0.5)
            h = crandn(rng, 1)[0] * dic.steering()[:, int(rng.integers(10, 80))]
            X = crandn(rng, 32, 64)
            y = X @ h + math.sqrt(noise_variance(30.0)) * crandn(rng, 32)
            errs.append(nmse(estimate_offgrid_linear(y, X, dic).h, h))
        assert np.median(errs) < 1e-2

    def test_fixed_steps_converge_to_true_angle(self):
        rng = np.random.default_rng(4)
        N, L = 32, 40
        dic = OffGridDictionary.spatial_frequency(ArrayGeometry.ula(N, 0.5), 1.0, L, 0.5)
        k = 17
        theta = dic.grid[k] + 0.3 * dic.r_theta
        from offgrid_sbl.array_model import steering_linear
        h = steering_linear(dic.geom, theta, 1.0)
        X = crandn(rng, 20, N)
        y = X @ h + math.sqrt(noise_variance(30.0)) * crandn(rng, 20)
        est = estimate_offgrid_linear(y, X, dic, cfg=RefineConfig(evidence_tol=0.0))
        assert len(est.trace) == 200
        l = int(np.argmax(np.abs(est.state.mu)))
        assert abs(dic.grid[l] + est.state.beta[l] - theta) < dic.r_theta / 50

    def test_noiseless_on_grid_extraction(self):
        rng = np.random.default_rng(2)
        dic = OffGridDictionary.spatial_frequency(ArrayGeometry.ula(16, 0.5), 1.0, 16, 0.5)
        h = (0.8 - 0.3j) * dic.steering()[:, 5]
        X = crandn(rng, 10, 16)
        est = ongrid_sbl_estimate(X @ h, X, dic)
        assert nmse(est.h, h) < 1e-8

    def test_evidence_monotone_in_line_search_mode(self):
        cfg = RefineConfig(step_mode="line_search", max_iters=40, evidence_tol=0.0)
        for seed in range(6):
            rng = np.random.default_rng(100 + seed)
            dic = OffGridDictionary.spatial_frequency(ArrayGeometry.ula(16, 0.5), 1.0, 24, 0.5)
            h = dic.steering(rng.uniform(-0.5, 0.5, 24) * dic.r_theta) @ (crandn(rng, 24) * (rng.random(24) < 0.15))
            X = crandn(rng, 10, 16)
            y = X @ h + 0.1 * crandn(rng, 10)
            ev = np.array([row.evidence for row in estimate_offgrid_linear(y, X, dic, cfg=cfg).trace])
            assert np.all(np.diff(ev) >= -1e-8)

    def test_frozen_offsets_equal_ongrid_sbl(self, rng):
        N = 16
        dic = OffGridDictionary.spatial_frequency(ArrayGeometry.ula(N, 0.5), 1.0, N, 0.5)
        X = crandn(rng, 10, N)
        y = crandn(rng, 10)
        a = estimate_offgrid_linear(y, X, dic, cfg=RefineConfig(refine_beta=False))
        b = ongrid_sbl_estimate(y, X, dic)
        assert np.array_equal(a.h, b.h)
        assert np.all(b.state.beta == 0)

    def test_planar_reduces_to_linear(self, rng):
        N = 12
        g = ArrayGeometry.ula(N, 0.5)
        dic = OffGridDictionary.spatial_frequency(g, 1.0, 18, 0.5)
        X = crandn(rng, 8, N)
        y = X @ (dic.steering(np.full(18, 0.01)) @ (crandn(rng, 18) * (rng.random(18) < 0.2))) + 0.05 * crandn(rng, 8)
        cfg = RefineConfig(max_iters=30, phi_init="zero", refine_phi=False)
        lin = estimate_offgrid_linear(y, X, dic, cfg=cfg)
        pla = estimate_offgrid_2d(y, X, dic, cfg=cfg)
        assert np.allclose(pla.h, lin.h, atol=1e-9)
        assert np.allclose(pla.state.beta, lin.state.beta)

    def test_planar_offgrid_beats_ongrid(self):
        from offgrid_sbl.channel_sim import ClusterChannelConfig, generate_channel
        g = ArrayGeometry.planar(8, 4, 0.5)
        dic = OffGridDictionary.uniform(g, 1.0, 96, (-math.pi, math.pi))
        cfg = ClusterChannelConfig(n_clusters=2, n_subpaths=1, azimuth_range=(-math.pi, math.pi),
                                   angular_spread=0.0, elevation_range=(-math.pi / 2, math.pi / 2))
        off, on = [], []
        for seed in range(4):
            rng = np.random.default_rng(seed)
            ch = generate_channel(cfg, g, 1.0, seed)
            X = crandn(rng, 24, 32)
            y = X @ ch.h + math.sqrt(noise_variance(10.0)) * crandn(rng, 24)
            off.append(nmse(estimate_offgrid_2d(y, X, dic, seed=seed).h, ch.h))
            frozen = RefineConfig(refine_beta=False, refine_phi=False)
            on.append(nmse(estimate_offgrid_2d(y, X, dic, cfg=frozen, seed=seed).h, ch.h))
        assert np.mean(off) < np.mean(on)

    def test_trace_csv(self, rng, tmp_path):
        dic = OffGridDictionary.spatial_frequency(ArrayGeometry.ula(8, 0.5), 1.0, 8, 0.5)
        X = crandn(rng, 6, 8)
        est = estimate_offgrid_linear(crandn(rng, 6), X, dic, cfg=RefineConfig(max_iters=5, evidence_tol=0.0))
        p = tmp_path / "trace.csv"
        write_trace(est.trace, p)
        rows = list(csv.reader(open(p)))
        assert rows[0] == ["iteration", "evidence", "max_beta_step", "n_active"]
        assert len(rows) == 6 and [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 5]

    def test_shape_mismatch(self, rng):
        dic = OffGridDictionary.spatial_frequency(ArrayGeometry.ula(8, 0.5), 1.0, 8, 0.5)
        with pytest.raises(ValueError, match="rows"):
            estimate_offgrid_linear(crandn(rng, 5), crandn(rng, 6, 8), dic)

    def test_numerical_failure_names_iteration(self, rng):
        dic = OffGridDictionary.spatial_frequency(ArrayGeometry.ula(8, 0.5), 1.0, 8, 0.5)
        y = crandn(rng, 6)
        y[2] = np.inf
        with pytest.raises(NumericalError, match="iteration 1"):
            estimate_offgrid_linear(y, crandn(rng, 6, 8), dic)
