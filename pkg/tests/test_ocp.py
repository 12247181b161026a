"""Transcription layout, cost terms, derivative exactness, homotopy arithmetic."""
import numpy as np
import pytest

from polycontact import geometry as geo
from polycontact import nlp
from polycontact import ocp as ocpm
from polycontact import scenarios


def small_body():
    cube = geo.box_polytope([0.05] * 3)
    slab = geo.box_polytope([0.4, 0.4, 0.05],
                            geo.Pose(np.array([0, 0, -0.05]), np.array([1.0, 0, 0, 0])))
    wall = geo.box_polytope([0.05, 0.4, 0.2],
                            geo.Pose(np.array([0.15, 0, 0.2]), np.array([1.0, 0, 0, 0])))
    return geo.BodySpec(mass=0.1, inertia=[1e-4] * 3, actuated=[cube],
                        environment=[slab, wall], pairs=[(0, 0), (0, 1)])


def small_config(mode="smoothing", N=3, n_s=2):
    x0 = np.zeros(13)
    x0[2] = 0.2
    x0[3] = 1.0
    xg = np.zeros(13)
    xg[2] = 0.05
    xg[3] = 1.0
    dirs = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])[:n_s]
    return ocpm.OcpConfig(N=N, dt=0.04, n_s=n_s, k_t=50.0, k_r=5.0, n_hom=2,
                          tau_1=2.5e-3, sigma_1=1.25e-3, mu_init_1=1.0,
                          kappa_tau=0.5, kappa_sigma=0.5, kappa_mu=0.1,
                          beta_r=[1, 0.1, 100, 10], beta_c=[1, 0.1, 10000, 1000],
                          delta_hat=0.02, rho_dir=dirs, x0=x0, x_goal=xg,
                          mode=mode, ip_tol=1e-11)


class TestLayout:
    def test_variable_count_example(self):
        # N = 10, n_s = 2, one pair: 429 state + 20 force variables
        lay = ocpm.DecisionLayout(N=10, n_s=2, n_p=1)
        assert lay.n_states == 429
        assert lay.n_vars == 449

    def test_index_maps_disjoint_and_complete(self):
        lay = ocpm.DecisionLayout(N=4, n_s=3, n_p=2)
        seen = np.zeros(lay.n_vars, dtype=int)
        for k in range(5):
            seen[lay.xr(k)] += 1
        for l in range(3):
            for k in range(5):
                seen[lay.xc(l, k)] += 1
            for k in range(4):
                seen[lay.lam(l, k)] += 1
        assert np.all(seen == 1)


class TestInitialGuess:
    def test_forces_positive_and_interior(self):
        prob, lay = ocpm.build_ocp(small_config(), small_body())
        x = ocpm.initial_guess(prob)
        for l in range(2):
            for k in range(3):
                assert np.all(x[lay.lam(l, k)] > 0)

    def test_initial_state_constraints_exact(self):
        cfg = small_config()
        prob, lay = ocpm.build_ocp(cfg, small_body())
        x = ocpm.initial_guess(prob)
        eq = prob.eq(x)
        assert np.allclose(eq[:13], 0.0)
        # scenario initial-state rows are exactly satisfied as well
        row = 13 + 7 * cfg.N
        for l in range(cfg.n_s):
            assert np.allclose(eq[row:row + 13], 0.0)
            row += 13 + cfg.N * prob.n_H

    def test_guess_complementarity_scale(self):
        cfg = small_config()
        prob, lay = ocpm.build_ocp(cfg, small_body())
        x = ocpm.initial_guess(prob)
        data, poses = prob._batch_contacts(x, level=0)
        for l in range(cfg.n_s):
            for k in range(cfg.N):
                phi = data.phi[prob._item_base(l, k):prob._item_base(l, k) + 2]
                lam = x[lay.lam(l, k)]
                prod = np.maximum(phi, 0.01) * lam
                assert np.all(prod <= 10 * cfg.sigma_1)
                assert np.all(prod >= cfg.sigma_1 / 10)


class TestCost:
    def test_zero_at_goal_rest(self):
        cfg = small_config()
        prob, lay = ocpm.build_ocp(cfg, small_body())
        x = np.zeros(lay.n_vars)
        for k in range(cfg.N + 1):
            x[lay.xr(k)] = np.concatenate([cfg.x_goal[:7], np.zeros(6)])
            for l in range(cfg.n_s):
                x[lay.xc(l, k)] = np.concatenate([cfg.x_goal[:7], np.zeros(6)])
        assert prob.cost(x) == pytest.approx(0.0, abs=1e-14)

    def test_single_velocity_term(self):
        cfg = small_config()
        cfg.beta_r = np.array([1.0, 0, 0, 0])
        cfg.beta_c = np.zeros(4)
        prob, lay = ocpm.build_ocp(cfg, small_body())
        x = np.zeros(lay.n_vars)
        for k in range(cfg.N + 1):
            x[lay.xr(k)] = np.concatenate([cfg.x_goal[:7], np.zeros(6)])
            for l in range(cfg.n_s):
                x[lay.xc(l, k)] = np.concatenate([cfg.x_goal[:7], np.zeros(6)])
        sl = lay.xr(1)
        x[sl.start + 7] = 1.0   # nu_x = 1 at the first reference knot
        assert prob.cost(x) == pytest.approx(1.0, abs=1e-14)

    def test_frobenius_at_180deg(self):
        R_goal = geo.rotation_matrix_free(np.array([1.0, 0, 0, 0]))
        xi = np.array([0.0, 0.0, 0.0, 1.0])   # 180 degrees about z
        val, _, _, _ = ocpm.rotation_cost(xi, R_goal)
        assert val == pytest.approx(8.0, abs=1e-12)

    def test_rotation_cost_derivatives_fd(self):
        rng = np.random.default_rng(0)
        R_goal = geo.rotation_matrix_free(geo.quat_normalize(rng.normal(size=4)))
        for _ in range(10):
            xi = rng.normal(size=4) * rng.uniform(0.8, 1.2)
            val, grad, hess, hess_gn = ocpm.rotation_cost(xi, R_goal)
            h = 1e-6
            for m in range(4):
                e = np.zeros(4)
                e[m] = h
                vp = ocpm.rotation_cost(xi + e, R_goal)[0]
                vm = ocpm.rotation_cost(xi - e, R_goal)[0]
                assert (vp - vm) / (2 * h) == pytest.approx(grad[m], abs=2e-5)
                gp = ocpm.rotation_cost(xi + e, R_goal)[1]
                gm = ocpm.rotation_cost(xi - e, R_goal)[1]
                assert np.allclose((gp - gm) / (2 * h), hess[:, m], atol=2e-4)
            # the Gauss-Newton block is PSD
            assert np.linalg.eigvalsh(hess_gn).min() >= -1e-10


@pytest.mark.parametrize("mode", ["smoothing", "relaxation"])
class TestDerivatives:
    def test_jacobians_and_hessian_fd(self, mode):
        cfg = small_config(mode=mode)
        body = small_body()
        prob, lay = ocpm.build_ocp(cfg, body)
        rng = np.random.default_rng(7)
        x = ocpm.initial_guess(prob) + 0.02 * rng.normal(size=lay.n_vars)
        J_e = prob.eq_jac(x).toarray()
        J_i = prob.ineq_jac(x).toarray()
        scale_e = np.maximum(np.abs(J_e).max(axis=1), 1.0)
        h = 1e-6
        idx = rng.choice(prob.n, size=30, replace=False)
        for m in idx:
            e = np.zeros(prob.n)
            e[m] = h
            de = (prob.eq(x + e) - prob.eq(x - e)) / (2 * h)
            di = (prob.ineq(x + e) - prob.ineq(x - e)) / (2 * h)
            assert np.max(np.abs(de - J_e[:, m]) / scale_e) <= 1e-5
            assert np.max(np.abs(di - J_i[:, m])) <= 1e-6
        y = rng.normal(size=prob.m_e)
        z = rng.uniform(0.1, 1.0, size=prob.m_i)
        H = prob.lag_hess(x, y, z).toarray()
        assert np.max(np.abs(H - H.T)) <= 1e-10

        def lag_grad(xv):
            return (prob.cost_grad(xv) + prob.eq_jac(xv).T @ y
                    + prob.ineq_jac(xv).T @ z)

        for m in idx[:10]:
            e = np.zeros(prob.n)
            e[m] = 1e-6
            dg = (lag_grad(x + e) - lag_grad(x - e)) / 2e-6
            rel = np.max(np.abs(dg - H[:, m])) / max(1.0, np.max(np.abs(dg)))
            assert rel <= 1e-4

    def test_gauss_newton_psd(self, mode):
        cfg = small_config(mode=mode)
        prob, lay = ocpm.build_ocp(cfg, small_body())
        rng = np.random.default_rng(8)
        x = ocpm.initial_guess(prob) + 0.01 * rng.normal(size=lay.n_vars)
        Hgn = prob.cost_gn_hess(x).toarray()
        assert np.linalg.eigvalsh(Hgn).min() >= -1e-9


class TestFeasibleRollout:
    def test_constraints_vanish_on_simulated_trajectory(self):
        # plug a forward-simulated trajectory into the transcription: all
        # rows must vanish (residuals <= 1e-8), tying optimizer and simulator
        from polycontact import collision as col
        from polycontact import dynamics as dyn
        from polycontact import impedance as imp

        body = scenarios.free_reach_body()
        cfg = scenarios.free_reach_config(N=8, n_s=1)
        prob, lay = ocpm.build_ocp(cfg, body)
        prob.set_smoothing(cfg.tau_1, cfg.sigma_1)
        model = dyn.ContactModel(body, prob._ip_settings())
        # reference: constant pose trajectory, v_r = 0; the compliant copy
        # starts at its offset initial state
        ref = np.tile(cfg.x0, (cfg.N + 1, 1))
        res = dyn.rollout(prob._x_c0[0], ref, prob.gains, prob.offsets[0],
                          cfg.dt, cfg.sigma_1, model)
        x = np.zeros(lay.n_vars)
        for k in range(cfg.N + 1):
            x[lay.xr(k)] = ref[k]
            x[lay.xc(0, k)] = res.states[k]
        for k in range(cfg.N):
            x[lay.lam(0, k)] = res.forces[k]
        assert np.max(np.abs(prob.eq(x))) <= 1e-8
        assert np.max(np.clip(prob.ineq(x), 0.0, None)) <= 1e-12


class TestRelaxationContainsSmoothing:
    def test_smoothing_solution_feasible_for_relaxation(self):
        cfg_s = small_config(mode="smoothing")
        body = small_body()
        prob_s, lay = ocpm.build_ocp(cfg_s, body)
        prob_s.set_smoothing(cfg_s.tau_1, cfg_s.sigma_1)
        x = ocpm.initial_guess(prob_s)
        sol = nlp.solve_nlp(prob_s, x, mu_init=1.0, tol=1e-6, max_iter=400,
                            hessian="exact")
        assert sol.stats.converged
        cfg_r = small_config(mode="relaxation")
        prob_r, _ = ocpm.build_ocp(cfg_r, body)
        prob_r.set_smoothing(cfg_r.tau_1, cfg_r.sigma_1)
        gi = prob_r.ineq(sol.x)
        assert np.max(gi) <= 1e-7


class TestHomotopySchedule:
    def test_peg_table_values(self):
        cfg = scenarios.cube_in_slot_config(N=10, n_s=1, n_hom=5)
        sched = cfg.homotopy_schedule()
        taus = [s[0] for s in sched]
        sigmas = [s[1] for s in sched]
        mus = [s[2] for s in sched]
        assert taus[0] == pytest.approx(0.0025)
        assert taus[4] == pytest.approx(1.5625e-4)
        assert sigmas[4] == pytest.approx(7.8125e-5)
        assert mus[4] == pytest.approx(1e-4)
        for seq in (taus, sigmas, mus):
            assert all(b < a for a, b in zip(seq, seq[1:]))

    def test_clamp_table_values(self):
        cfg = scenarios.cube_in_slot_config(N=10, n_s=1, n_hom=6)
        cfg.tau_1 = 0.0005
        cfg.sigma_1 = 0.00025
        sched = cfg.homotopy_schedule()
        assert sched[5][0] == pytest.approx(1.5625e-5)
        assert sched[5][1] == pytest.approx(7.8125e-6)

    def test_exact_geometric_law(self):
        cfg = scenarios.cube_in_slot_config(N=10, n_s=1, n_hom=5)
        for n, (tau, sigma, mu) in enumerate(cfg.homotopy_schedule()):
            assert tau == cfg.tau_1 * cfg.kappa_tau ** n
            assert sigma == cfg.sigma_1 * cfg.kappa_sigma ** n
            assert mu == cfg.mu_init_1 * cfg.kappa_mu ** n


class TestNlpOnSmokeProblems:
    def test_unconstrained_qp_fast(self):
        import scipy.sparse as sp

        rng = np.random.default_rng(1)
        A = rng.normal(size=(6, 6))
        Q = A @ A.T + np.eye(6)
        c = rng.normal(size=6)

        class Smoke:
            n = 6

            def cost(self, x):
                return 0.5 * x @ Q @ x + c @ x

            def cost_grad(self, x):
                return Q @ x + c

            def eq(self, x):
                return np.zeros(0)

            def ineq(self, x):
                return np.zeros(0)

            def eq_jac(self, x):
                return sp.csr_matrix((0, 6))

            def ineq_jac(self, x):
                return sp.csr_matrix((0, 6))

            def lag_hess(self, x, y, z):
                return sp.csr_matrix(Q)

            def cost_gn_hess(self, x):
                return sp.csr_matrix(Q)

        sol = nlp.solve_nlp(Smoke(), np.zeros(6), mu_init=0.1, tol=1e-10,
                            max_iter=15)
        assert sol.stats.converged
        assert sol.stats.iterations <= 15

    def test_warm_resolve_is_fast(self):
        body = scenarios.free_reach_body()
        cfg = scenarios.free_reach_config(N=6, n_s=1)
        prob, lay = ocpm.build_ocp(cfg, body)
        prob.set_smoothing(cfg.tau_1, cfg.sigma_1)
        x = ocpm.initial_guess(prob)
        sol = nlp.solve_nlp(prob, x, mu_init=1.0, tol=1e-7, max_iter=200)
        assert sol.stats.converged
        re = nlp.solve_nlp(prob, sol.x, mu_init=1e-6, tol=1e-7, max_iter=200,
                           warm_y=sol.y, warm_z=sol.z)
        assert re.stats.converged
        assert re.stats.iterations <= 5


class TestValidateSolution:
    def test_metrics_nonnegative_and_rollout_consistency(self):
        body = scenarios.free_reach_body()
        cfg = scenarios.free_reach_config(N=8, n_s=2, n_hom=2)
        sol, prob, reports = ocpm.homotopy_solve(cfg, body)
        assert all(r.converged for r in reports)
        m = ocpm.validate_solution(prob, sol.x)
        for (t, r) in m["terminal_errors"]:
            assert t >= 0 and r >= 0
        assert m["max_comp_residual"] <= prob.sigma * 1.1
        assert m["rollout_max_deviation"] <= 1e-4

    def test_warm_start_determinism(self):
        body = scenarios.free_reach_body()
        cfg = scenarios.free_reach_config(N=6, n_s=1, n_hom=2)
        sol1, _, rep1 = ocpm.homotopy_solve(cfg, body)
        sol2, _, rep2 = ocpm.homotopy_solve(cfg, body)
        assert np.array_equal(sol1.x, sol2.x)
        assert [r.iterations for r in rep1] == [r.iterations for r in rep2]
