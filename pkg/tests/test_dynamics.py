"""Time-stepping contact dynamics: residuals, step solves, rollouts."""
import numpy as np
import pytest

from polycontact import collision as col
from polycontact import dynamics as dyn
from polycontact import geometry as geo
from polycontact import impedance as imp


def drop_model(inertia=1e6, tau=1e-12, tol=1e-13):
    """Cube above a wide slab whose top face is at z = 0.

    A huge inertia freezes the rotational degrees of freedom, which are
    physically unstable for frictionless corner contact, so the motion stays
    one-dimensional and comparable to a scalar oracle.
    """
    cube = geo.box_polytope([0.05, 0.05, 0.05])
    slab = geo.box_polytope([0.5, 0.5, 0.05],
                            geo.Pose(np.array([0, 0, -0.05]), np.array([1.0, 0, 0, 0])))
    body = geo.BodySpec(mass=0.1, inertia=[inertia] * 3, actuated=[cube],
                        environment=[slab], pairs=[(0, 0)])
    return dyn.ContactModel(body, col.IpSettings(tau=tau, tol=tol, max_iter=120))


def scalar_drop_oracle(z, w, dt, sigma, force=-0.5, mass=0.1, half=0.05):
    """Independent 1-DoF smoothed Moreau step (closed-form force solve)."""
    g = z - half
    a0 = g + dt * (w + dt * force / mass)
    D = dt * dt / mass
    lam = (-a0 + np.sqrt(a0 * a0 + 4.0 * D * sigma)) / (2.0 * D)
    w2 = w + dt * (force + lam) / mass
    return z + dt * w2, w2, lam


class TestKinematicMap:
    def test_translational_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            q = geo.Pose(rng.normal(size=3), geo.quat_normalize(rng.normal(size=4)))
            Q = dyn.kinematic_map(q)
            assert np.array_equal(Q[:3, :3], np.eye(3))
            assert np.all(Q[:3, 3:] == 0) and np.all(Q[3:, :3] == 0)

    def test_identity_pose_rate(self):
        Q = dyn.kinematic_map(geo.Pose.identity())
        rate = Q[3:, 3:] @ np.array([0.0, 0.0, 1.0])
        assert np.allclose(rate, [0, 0, 0, 0.5])

    def test_rate_matrix_orthonormal_columns(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            xi = geo.quat_normalize(rng.normal(size=4))
            Om = geo.quat_rate_matrix(xi)
            assert np.max(np.abs(Om.T @ Om - np.eye(3))) <= 1e-12


class TestStepResiduals:
    def test_free_flight(self):
        model = drop_model()
        x = np.zeros(13)
        x[2] = 1.0
        x[3] = 1.0
        x[7] = 0.25  # constant x velocity
        dt = 0.01
        q_next = dyn.integrate_pose_implicit(x[:7], x[7:], dt)
        x_next = np.concatenate([q_next, x[7:]])
        contacts = model.evaluate(geo.normalize_pose(geo.Pose(x[:3], x[3:7])))
        mode = dyn.RelaxationMode("smoothing", 1e-4)
        res = dyn.step_residuals(x, x_next, np.zeros(6), np.zeros(1), contacts,
                                 dt, mode, model.body)
        assert np.max(np.abs(res.H[:13])) <= 1e-12
        # with lam = 0 the smoothing equality shows exactly -sigma
        assert np.allclose(res.H[13:], -1e-4)
        assert np.all(res.G <= 0)

    def test_relaxation_dimensions(self):
        model = drop_model()
        x = np.zeros(13)
        x[2] = 1.0
        x[3] = 1.0
        contacts = model.evaluate(geo.Pose(x[:3], x[3:7]))
        mode = dyn.RelaxationMode("relaxation", 1e-4)
        res = dyn.step_residuals(x, x, np.zeros(6), np.zeros(1), contacts,
                                 0.01, mode, model.body)
        assert res.H.shape == (13,)
        assert res.G.shape == (3,)

    def test_velocity_space_normal_by_construction(self):
        model = drop_model()
        q = geo.Pose(np.array([0.0, 0, 0.3]), np.array([1.0, 0, 0, 0]))
        contacts = model.evaluate(q)
        Q = dyn.kinematic_map(q)
        phi, N = dyn.velocity_space_normals(contacts, q)
        assert np.array_equal(N[:, 0], Q.T @ contacts[0].normal)


class TestSimulateStep:
    def test_free_integration(self):
        model = drop_model()
        x = np.zeros(13)
        x[2] = 1.0
        x[3] = 1.0
        x[7:10] = [0.1, -0.05, 0.02]
        dt = 0.01
        x_next, lam, contacts, _ = dyn.simulate_step(x, np.zeros(6), dt, 1e-6, model)
        assert np.allclose(x_next[7:], x[7:], atol=1e-7)
        assert np.allclose(x_next[:3], x[:3] + dt * x_next[7:10], atol=1e-12)
        # far gap: lam ~ sigma / gap
        assert lam[0] == pytest.approx(1e-6 / contacts[0].phi, rel=0.1)

    def test_drop_matches_scalar_oracle_per_step(self):
        model = drop_model()
        dt, sigma = 0.01, 1e-4
        U = np.zeros(6)
        U[2] = -0.5
        x = np.zeros(13)
        x[2] = 0.2
        x[3] = 1.0
        worst = 0.0
        for k in range(120):
            z_o, w_o, _ = scalar_drop_oracle(x[2], x[9], dt, sigma)
            x, lam, contacts, _ = dyn.simulate_step(x, U, dt, sigma, model, seed=k)
            worst = max(worst, abs(x[2] - z_o), abs(x[9] - w_o))
        assert worst <= 1e-8

    def test_post_impact_normal_velocity(self):
        model = drop_model()
        dt, sigma = 0.01, 1e-4
        U = np.zeros(6)
        U[2] = -0.5
        x = np.zeros(13)
        x[2] = 0.2
        x[3] = 1.0
        for k in range(150):
            x, lam, contacts, _ = dyn.simulate_step(x, U, dt, sigma, model, seed=k)
        assert x[9] >= -1e-6
        assert contacts[0].phi > 0

    def test_resting_gap_scales_with_sigma(self):
        model = drop_model()
        dt = 0.01
        U = np.zeros(6)
        U[2] = -0.5
        gaps = []
        for sigma in (1e-2, 1e-3, 1e-4):
            # start at the smoothed equilibrium: gap * lam = sigma, lam = 0.5
            x = np.zeros(13)
            x[2] = 0.05 + sigma / 0.5
            x[3] = 1.0
            for k in range(200):
                x, lam, contacts, _ = dyn.simulate_step(x, U, dt, sigma, model, seed=k)
            gaps.append(x[2] - 0.05)
        assert gaps[0] / gaps[1] == pytest.approx(10.0, rel=0.05)
        assert gaps[1] / gaps[2] == pytest.approx(10.0, rel=0.05)

    def test_energy_dissipates_under_zero_wrench(self):
        # flat face-on impact: the inelastic velocity update only removes
        # kinetic energy (up to the sigma-smoothing forces acting at a
        # distance). Rotation is frozen since frictionless corner impacts of
        # a tumbling cube legitimately trade energy through the
        # penetration-stabilization term.
        model = drop_model(inertia=1e6, tau=1e-10, tol=1e-12)
        dt, sigma = 0.01, 1e-6
        x = np.zeros(13)
        x[2] = 0.12
        x[3] = 1.0
        x[9] = -0.8   # approaching the slab
        M = model.body.mass_matrix
        ke = [0.5 * float(x[7:] @ (M @ x[7:]))]
        for k in range(60):
            x, lam, contacts, _ = dyn.simulate_step(x, np.zeros(6), dt, sigma,
                                                    model, seed=k)
            ke.append(0.5 * float(x[7:] @ (M @ x[7:])))
        # the smoothing force can add at most sigma/2 per step
        assert all(k2 <= k1 + sigma for k1, k2 in zip(ke, ke[1:]))
        assert ke[-1] < 0.5 * ke[0]

    def test_quaternion_drift_bounded(self):
        model = drop_model(inertia=1e-4, tau=1e-8, tol=1e-10)
        dt = 0.005
        x = np.zeros(13)
        x[2] = 1.0
        x[3] = 1.0
        x[10:] = [2.0, -1.0, 1.5]   # free tumbling far from contact
        for k in range(100):
            x, _, _, _ = dyn.simulate_step(x, np.zeros(6), dt, 1e-6, model, seed=k)
            drift = abs(np.linalg.norm(x[3:7]) - 1.0)
            omega = np.linalg.norm(x[10:])
            assert drift <= 2.0 * dt * omega ** 2 + 1e-9

    def test_angular_momentum_constant_without_gyroscopic_term(self):
        # the velocity update carries no omega x I omega term, so body-frame
        # angular momentum stays constant in contact-free tumbling even for a
        # non-spherical inertia (up to the sigma-forces acting at a distance)
        cube = geo.box_polytope([0.05] * 3)
        slab = geo.box_polytope([0.5, 0.5, 0.05],
                                geo.Pose(np.array([0, 0, -2.0]), np.array([1.0, 0, 0, 0])))
        body = geo.BodySpec(mass=0.1, inertia=[1e-4, 2e-4, 3e-4], actuated=[cube],
                            environment=[slab], pairs=[(0, 0)])
        model = dyn.ContactModel(body, col.IpSettings(tau=1e-10, tol=1e-12,
                                                      max_iter=120))
        dt = 0.01
        x = np.zeros(13)
        x[2] = 1.0
        x[3] = 1.0
        x[10:] = [1.0, 2.0, -0.5]
        L0 = model.body.inertia * x[10:]
        for k in range(50):
            x, _, _, _ = dyn.simulate_step(x, np.zeros(6), dt, 1e-10, model, seed=k)
        assert np.allclose(model.body.inertia * x[10:], L0, atol=1e-7)


class TestRollout:
    def make_tracking_setup(self):
        cube = geo.box_polytope([0.05] * 3)
        slab = geo.box_polytope([0.4, 0.4, 0.05],
                                geo.Pose(np.array([0, 0, -0.6]), np.array([1.0, 0, 0, 0])))
        body = geo.BodySpec(mass=0.1, inertia=[2e-4] * 3, actuated=[cube],
                            environment=[slab], pairs=[(0, 0)])
        model = dyn.ContactModel(body, col.IpSettings(tau=1e-8))
        gains = imp.make_gains(50.0, 5.0, body)
        return model, gains

    def test_step_response_no_overshoot(self):
        model, gains = self.make_tracking_setup()
        N, dt = 150, 0.02
        ref = np.zeros((N + 1, 13))
        ref[:, 0] = 0.1
        ref[:, 2] = 0.3
        ref[:, 3] = 1.0
        x0 = np.zeros(13)
        x0[2] = 0.3
        x0[3] = 1.0
        res = dyn.rollout(x0, ref, gains, geo.Pose.identity(), dt, 1e-6, model)
        xs = res.states[:, 0]
        assert np.max(xs) - 0.1 <= 1e-3 * 0.1
        assert abs(xs[-1] - 0.1) <= 1e-4

    def test_offset_tracking_error_equals_offset(self):
        model, gains = self.make_tracking_setup()
        N, dt = 150, 0.02
        ref = np.zeros((N + 1, 13))
        ref[:, 0] = 0.1
        ref[:, 2] = 0.3
        ref[:, 3] = 1.0
        x0 = np.zeros(13)
        x0[2] = 0.3
        x0[3] = 1.0
        q_hat = geo.Pose(np.array([0.02, 0.0, 0.0]), np.array([1.0, 0, 0, 0]))
        res = dyn.rollout(x0, ref, gains, q_hat, dt, 1e-6, model)
        err = ref[-1, :3] - res.states[-1, :3]
        assert np.allclose(err, q_hat.rho, atol=1e-4)

    def test_failure_carries_step_index(self):
        model, gains = self.make_tracking_setup()
        ref = np.zeros((4, 13))
        ref[:, 3] = 1.0
        x0 = np.zeros(13)
        x0[3] = 1.0
        x0[2] = np.nan
        with pytest.raises(dyn.StepFailure) as exc:
            dyn.rollout(x0, ref, gains, geo.Pose.identity(), 0.02, 1e-6, model)
        assert "step 0" in str(exc.value)


class TestSolvedStepInvariants:
    def test_complementarity_residual_at_solved_steps(self):
        model = drop_model(inertia=1e6, tau=1e-10, tol=1e-12)
        dt, sigma = 0.01, 1e-4
        U = np.zeros(6)
        U[2] = -0.5
        mode = dyn.RelaxationMode("smoothing", sigma)
        x = np.zeros(13)
        x[2] = 0.08
        x[3] = 1.0
        for k in range(60):
            q_t = geo.normalize_pose(geo.Pose(x[:3], x[3:7]))
            contacts = model.evaluate(q_t, seed=k)
            x_next, lam, _, U_fin = dyn.simulate_step(x, U, dt, sigma, model, seed=k)
            res = dyn.step_residuals(x, x_next, U_fin, lam, contacts, dt, mode,
                                     model.body)
            phi, N = dyn.velocity_space_normals(contacts, q_t)
            a = phi + dt * (N.T @ x_next[7:])
            assert np.max(np.abs(a * lam - sigma)) <= 1e-9
            assert np.all(a >= -1e-9)
            assert np.all(lam >= -1e-9)
            assert np.max(np.abs(res.H)) <= 1e-9
            x = x_next
