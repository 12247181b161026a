"""Multi-scenario contact-implicit trajectory optimization.

Transcribes the robust assembly problem: one kinematic reference trajectory
(the reference velocities are the effective controls) plus ``n_s`` compliant
copies, each tracking the reference through the impedance law at a constant
positional offset, each subject to the smoothed time-stepping contact
dynamics. Cost, constraints, sparse Jacobians, and the exact Lagrangian
Hessian (including the collision directional Hessians) are assembled
analytically; the problem object plugs into the interior-point solver in
:mod:`polycontact.nlp`, and a homotopy driver tightens (tau, sigma, mu_init)
geometrically with primal-dual warm starts.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import collision, dynamics, impedance, nlp
from .geometry import (BodySpec, Pose, hamilton_tensor, normalize_hessian_weighted,
                       normalize_jacobian, pose_perturb_inverse, quat_rate_matrix,
                       quat_right_matrix, rotation_matrix_free,
                       rotation_quadratic_tensor)

Array = np.ndarray


@dataclass
class OcpConfig:
    """Scenario, cost, gain, and homotopy parameters of one assembly problem."""

    N: int
    dt: float
    n_s: int
    k_t: float
    k_r: float
    n_hom: int
    tau_1: float
    sigma_1: float
    mu_init_1: float
    kappa_tau: float
    kappa_sigma: float
    kappa_mu: float
    beta_r: Array          # (4,) running nu, running omega, terminal pos, terminal rot
    beta_c: Array          # (4,)
    delta_hat: float
    rho_dir: Array         # (n_s, 3) unit offset directions
    x0: Array              # (13,)
    x_goal: Array          # (13,)
    mode: str = "smoothing"
    hessian: str = "exact"
    tol: float = 1e-6
    ip_tol: float = 1e-10
    ip_max_iter: int = 60
    max_nlp_iter: int = 3000

    def __post_init__(self) -> None:
        self.beta_r = np.asarray(self.beta_r, dtype=float).reshape(4)
        self.beta_c = np.asarray(self.beta_c, dtype=float).reshape(4)
        self.rho_dir = np.asarray(self.rho_dir, dtype=float).reshape(self.n_s, 3)
        self.x0 = np.asarray(self.x0, dtype=float).reshape(13)
        self.x_goal = np.asarray(self.x_goal, dtype=float).reshape(13)
        if self.N < 1 or self.n_s < 1 or self.n_hom < 1:
            raise ValueError("N, n_s, n_hom must be >= 1")
        for kappa in (self.kappa_tau, self.kappa_sigma, self.kappa_mu):
            if not 0.0 < kappa < 1.0:
                raise ValueError("homotopy rates must lie in (0, 1)")
        norms = np.linalg.norm(self.rho_dir, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("rho_dir rows must be unit vectors")
        if np.any(self.beta_r < 0.0) or np.any(self.beta_c < 0.0):
            raise ValueError("cost weights must be nonnegative")
        if self.mode not in ("smoothing", "relaxation"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def offsets(self) -> list:
        """Scenario offset poses q_hat = (delta_hat * dir, identity quaternion)."""
        return [Pose(self.delta_hat * self.rho_dir[l], np.array([1.0, 0, 0, 0]))
                for l in range(self.n_s)]

    def homotopy_schedule(self) -> list:
        """[(tau_n, sigma_n, mu_n)] geometric sequences, n = 1..n_hom."""
        return [(self.tau_1 * self.kappa_tau ** n, self.sigma_1 * self.kappa_sigma ** n,
                 self.mu_init_1 * self.kappa_mu ** n) for n in range(self.n_hom)]


@dataclass
class DecisionLayout:
    """Index maps for the stacked decision vector.

    Order: reference states x_r(0..N), then per scenario the compliant
    states x_c(0..N), then per (scenario, interval) the contact forces.
    """

    N: int
    n_s: int
    n_p: int

    @property
    def n_states(self) -> int:
        return 13 * (self.N + 1) * (1 + self.n_s)

    @property
    def n_vars(self) -> int:
        return self.n_states + self.N * self.n_s * self.n_p

    def xr(self, k: int) -> slice:
        return slice(13 * k, 13 * k + 13)

    def xc(self, l: int, k: int) -> slice:
        base = 13 * (self.N + 1) * (1 + l)
        return slice(base + 13 * k, base + 13 * k + 13)

    def lam(self, l: int, k: int) -> slice:
        base = self.n_states + self.n_p * (l * self.N + k)
        return slice(base, base + self.n_p)


def rotation_cost(xi: Array, R_goal: Array):
    """||R(xi/||xi||) - R_goal||_F^2 with exact gradient/Hessian and GN Hessian."""
    S = rotation_quadratic_tensor()
    r = float(np.linalg.norm(xi))
    u = xi / r
    Su = S @ u                       # (3, 3, 4)
    R = Su @ u
    E = R - R_goal
    val = float(np.sum(E * E))
    A_u = np.einsum("mn,mnr->r", E, Su)          # (4,) = sum E_mn S_mn u
    grad_u = 4.0 * A_u
    Jn = normalize_jacobian(xi)
    grad = grad_u @ Jn
    h_gn_u = 8.0 * np.einsum("mnr,mns->rs", Su, Su)
    A_mat = np.einsum("mn,mnrs->rs", E, S)
    h_u = h_gn_u + 4.0 * A_mat
    curv = normalize_hessian_weighted(xi, grad_u)
    hess = Jn.T @ h_u @ Jn + curv
    hess_gn = Jn.T @ h_gn_u @ Jn
    return val, grad, hess, hess_gn


def _psi_matrix(n_xi: Array) -> Array:
    """Psi(n)[j, r] = d(Omega(xi)^T n)_j / d xi_r for fixed n (3x4)."""
    M = hamilton_tensor()
    return np.einsum("i,irj->jr", n_xi, M[:, :, 1:])


def _cross_hessian_quat_omega(mu_xi: Array, dt: float) -> Array:
    """<mu_xi, d^2 (-dt/2 xi (x) (0, omega))> cross block, shape (4, 3)."""
    M = hamilton_tensor()
    return -0.5 * dt * np.einsum("i,irs->rs", mu_xi, M[:, :, 1:])


class OcpProblem:
    """NLP adapter: residuals, sparse Jacobians, exact/GN Lagrangian Hessian.

    Collision solves are warm-started across iterates per (scenario, step,
    pair); residual-only evaluations (line-search trials) skip derivative
    work. Wall time spent in collision evaluation vs. other assembly is
    accumulated for the solve report.
    """

    def __init__(self, config: OcpConfig, body: BodySpec):
        self.config = config
        self.body = body
        self.layout = DecisionLayout(config.N, config.n_s, body.n_pairs)
        self.n = self.layout.n_vars
        self.pairs = collision.build_pair_geometries(
            body.actuated, body.environment, body.pairs)
        self.gains = impedance.make_gains(config.k_t, config.k_r, body)
        self.M_inv = body.mass_matrix_inverse
        self.M_diag = np.concatenate([np.full(3, body.mass), body.inertia])
        self.offsets = config.offsets
        self.tau = config.tau_1
        self.sigma = config.sigma_1
        self.smoothing = config.mode == "smoothing"
        self.n_H = 13 + (body.n_pairs if self.smoothing else 0)
        self.n_G = (2 if self.smoothing else 3) * body.n_pairs
        self.m_e = 13 + 7 * config.N + config.n_s * (13 + config.N * self.n_H)
        self.m_i = config.N * config.n_s * self.n_G
        self._warm_z = None
        self._warm_lam = None
        self._res_cache = {"x": None}
        self._jac_cache = {"x": None}
        self.time_collision = 0.0
        self.time_other = 0.0
        self._S = rotation_quadratic_tensor()
        self._R_goal = rotation_matrix_free(
            config.x_goal[3:7] / np.linalg.norm(config.x_goal[3:7]))
        self._x_c0 = [np.concatenate([
            pose_perturb_inverse(Pose(config.x0[:3], config.x0[3:7]), qh).as_vector(),
            config.x0[7:]]) for qh in self.offsets]

    def set_smoothing(self, tau: float, sigma: float) -> None:
        self.tau = tau
        self.sigma = sigma
        self._res_cache = {"x": None}
        self._jac_cache = {"x": None}

    def _ip_settings(self) -> collision.IpSettings:
        return collision.IpSettings(tau=self.tau, tol=self.config.ip_tol,
                                    max_iter=self.config.ip_max_iter)

    # ---------- contact bundles ----------

    def _batch_contacts(self, x: Array, level: int):
        """One vectorized distance sweep over every (scenario, interval, pair).

        Items are interval-major with pairs contiguous: item index
        ``(l * N + k) * n_pairs + p``. Solutions warm-start the next sweep.
        """
        cfg = self.config
        n_int = cfg.n_s * cfg.N
        t0 = time.perf_counter()
        poses = np.empty((n_int, 7))
        for l in range(cfg.n_s):
            for k in range(cfg.N):
                q0 = x[self.layout.xc(l, k)][:7]
                i = l * cfg.N + k
                poses[i, :3] = q0[:3]
                poses[i, 3:] = q0[3:] / np.linalg.norm(q0[3:])
        pose_idx = np.repeat(np.arange(n_int), self.body.n_pairs)
        data = collision.batch_contact_bundle(
            self.pairs, pose_idx, poses, self._ip_settings(), level,
            warm_z=self._warm_z, warm_lam=self._warm_lam, rescale_seed=0)
        self._warm_z = data.z.copy()
        self._warm_lam = data.lam.copy()
        self.time_collision += time.perf_counter() - t0
        return data, poses

    def _item_base(self, l: int, k: int) -> int:
        return (l * self.config.N + k) * self.body.n_pairs

    # ---------- residuals ----------

    def _wrench_inputs(self, x: Array, l: int, k: int):
        xr1 = x[self.layout.xr(k + 1)]
        xc1 = x[self.layout.xc(l, k + 1)]
        xhat = self._perturbed_state(xc1, l)
        return xr1, xc1, xhat

    def _perturbed_state(self, xc: Array, l: int) -> Array:
        """P_x applied to the normalized pose of a raw compliant state."""
        qh = self.offsets[l]
        xi = xc[3:7]
        u = xi / np.linalg.norm(xi)
        rho = xc[:3] + rotation_matrix_free(u) @ qh.rho
        xi_new = quat_right_matrix(qh.xi) @ u
        return np.concatenate([rho, xi_new, xc[7:]])

    def _normals_at(self, data, base: int, q_t_xi: Array):
        """(phi, N_tilde) for one interval from the batched sweep."""
        n_p = self.body.n_pairs
        w = data.w[base:base + n_p]
        phi = w[:, 0]
        Om = quat_rate_matrix(q_t_xi)
        Ntil = np.empty((6, n_p))
        Ntil[:3] = w[:, 1:4].T
        Ntil[3:] = 0.5 * (Om.T @ w[:, 4:8].T)
        return phi, Ntil

    def _interval_residuals(self, x: Array, l: int, k: int, data, poses):
        cfg = self.config
        dt = cfg.dt
        xc0 = x[self.layout.xc(l, k)]
        xc1 = x[self.layout.xc(l, k + 1)]
        lam = x[self.layout.lam(l, k)]
        xr1, _, xhat = self._wrench_inputs(x, l, k)
        U = impedance.impedance_wrench(xr1, xhat, self.gains)
        phi, Ntil = self._normals_at(data, self._item_base(l, k),
                                     poses[l * cfg.N + k, 3:])
        v1 = xc1[7:]
        Q1 = dynamics.kinematic_map(xc1[:7])
        h_pose = xc1[:7] - xc0[:7] - dt * (Q1 @ v1)
        # velocity rows scaled by M for solver conditioning (same constraint)
        h_vel = self.M_diag * (v1 - xc0[7:]) - dt * (U + Ntil @ lam)
        a = phi + dt * (Ntil.T @ v1)
        if self.smoothing:
            H = np.concatenate([h_pose, h_vel, a * lam - self.sigma])
            G = np.concatenate([-a, -lam])
        else:
            H = np.concatenate([h_pose, h_vel])
            G = np.concatenate([-a, -lam, a * lam - self.sigma])
        return H, G

    def _ensure_residuals(self, x: Array) -> None:
        c = self._res_cache
        if c["x"] is not None and np.array_equal(c["x"], x):
            return
        cfg = self.config
        t0 = time.perf_counter()
        coll0 = self.time_collision
        eq = np.empty(self.m_e)
        ineq = np.empty(self.m_i)
        eq[:13] = x[self.layout.xr(0)] - cfg.x0
        row = 13
        for k in range(cfg.N):
            xr0 = x[self.layout.xr(k)]
            xr1 = x[self.layout.xr(k + 1)]
            Q0 = dynamics.kinematic_map(xr0[:7])
            eq[row:row + 7] = xr1[:7] - xr0[:7] - cfg.dt * (Q0 @ xr1[7:])
            row += 7
        data, poses = self._batch_contacts(x, level=0)
        gi = 0
        for l in range(cfg.n_s):
            eq[row:row + 13] = x[self.layout.xc(l, 0)] - self._x_c0[l]
            row += 13
            for k in range(cfg.N):
                H, G = self._interval_residuals(x, l, k, data, poses)
                eq[row:row + self.n_H] = H
                ineq[gi:gi + self.n_G] = G
                row += self.n_H
                gi += self.n_G
        c["x"] = x.copy()
        c["eq"] = eq
        c["ineq"] = ineq
        self.time_other += (time.perf_counter() - t0) - (self.time_collision - coll0)

    # ---------- cost ----------

    def cost(self, x: Array) -> float:
        cfg = self.config
        val = 0.0
        for k in range(1, cfg.N + 1):
            v = x[self.layout.xr(k)][7:]
            val += cfg.beta_r[0] * float(v[:3] @ v[:3]) + cfg.beta_r[1] * float(v[3:] @ v[3:])
            for l in range(cfg.n_s):
                vc = x[self.layout.xc(l, k)][7:]
                val += cfg.beta_c[0] * float(vc[:3] @ vc[:3]) + cfg.beta_c[1] * float(vc[3:] @ vc[3:])
        goal_rho = cfg.x_goal[:3]
        xrN = x[self.layout.xr(cfg.N)]
        d = xrN[:3] - goal_rho
        val += cfg.beta_r[2] * float(d @ d)
        val += cfg.beta_r[3] * rotation_cost(xrN[3:7], self._R_goal)[0]
        for l in range(cfg.n_s):
            xcN = x[self.layout.xc(l, cfg.N)]
            d = xcN[:3] - goal_rho
            val += cfg.beta_c[2] * float(d @ d)
            val += cfg.beta_c[3] * rotation_cost(xcN[3:7], self._R_goal)[0]
        return val

    def cost_grad(self, x: Array) -> Array:
        cfg = self.config
        g = np.zeros(self.n)
        for k in range(1, cfg.N + 1):
            sl = self.layout.xr(k)
            g[sl.start + 7:sl.start + 10] += 2.0 * cfg.beta_r[0] * x[sl][7:10]
            g[sl.start + 10:sl.stop] += 2.0 * cfg.beta_r[1] * x[sl][10:]
            for l in range(cfg.n_s):
                sc = self.layout.xc(l, k)
                g[sc.start + 7:sc.start + 10] += 2.0 * cfg.beta_c[0] * x[sc][7:10]
                g[sc.start + 10:sc.stop] += 2.0 * cfg.beta_c[1] * x[sc][10:]
        goal_rho = cfg.x_goal[:3]
        for (sl, b3, b4) in self._terminal_blocks():
            xN = x[sl]
            g[sl.start:sl.start + 3] += 2.0 * b3 * (xN[:3] - goal_rho)
            _, grad4, _, _ = rotation_cost(xN[3:7], self._R_goal)
            g[sl.start + 3:sl.start + 7] += b4 * grad4
        return g

    def _terminal_blocks(self):
        cfg = self.config
        yield self.layout.xr(cfg.N), cfg.beta_r[2], cfg.beta_r[3]
        for l in range(cfg.n_s):
            yield self.layout.xc(l, cfg.N), cfg.beta_c[2], cfg.beta_c[3]

    def _cost_hessian(self, x: Array, gn: bool) -> sp.csr_matrix:
        cfg = self.config
        rows, cols, vals = [], [], []

        def add_diag(sl, start, stop, w):
            for i in range(start, stop):
                rows.append(sl.start + i)
                cols.append(sl.start + i)
                vals.append(w)

        for k in range(1, cfg.N + 1):
            add_diag(self.layout.xr(k), 7, 10, 2.0 * cfg.beta_r[0])
            add_diag(self.layout.xr(k), 10, 13, 2.0 * cfg.beta_r[1])
            for l in range(cfg.n_s):
                add_diag(self.layout.xc(l, k), 7, 10, 2.0 * cfg.beta_c[0])
                add_diag(self.layout.xc(l, k), 10, 13, 2.0 * cfg.beta_c[1])
        for (sl, b3, b4) in self._terminal_blocks():
            add_diag(sl, 0, 3, 2.0 * b3)
            _, _, hess, hess_gn = rotation_cost(x[sl][3:7], self._R_goal)
            Hq = hess_gn if gn else hess
            for i in range(4):
                for j in range(4):
                    rows.append(sl.start + 3 + i)
                    cols.append(sl.start + 3 + j)
                    vals.append(b4 * Hq[i, j])
        return sp.coo_matrix((vals, (rows, cols)), shape=(self.n, self.n)).tocsr()

    # ---------- public NLP interface ----------

    def eq(self, x: Array) -> Array:
        self._ensure_residuals(x)
        return self._res_cache["eq"]

    def ineq(self, x: Array) -> Array:
        self._ensure_residuals(x)
        return self._res_cache["ineq"]

    def eq_jac(self, x: Array) -> sp.csr_matrix:
        self._ensure_jacobians(x)
        return self._jac_cache["J_e"]

    def ineq_jac(self, x: Array) -> sp.csr_matrix:
        self._ensure_jacobians(x)
        return self._jac_cache["J_i"]

    def cost_gn_hess(self, x: Array) -> sp.csr_matrix:
        return self._cost_hessian(x, gn=True)

    # ---------- jacobians ----------

    def _ensure_jacobians(self, x: Array) -> None:
        c = self._jac_cache
        if c["x"] is not None and np.array_equal(c["x"], x):
            return
        cfg = self.config
        dt = cfg.dt
        t0 = time.perf_counter()
        coll0 = self.time_collision
        e_rows, e_cols, e_vals = [], [], []
        i_rows, i_cols, i_vals = [], [], []
        interval_data = {}

        def put(rows, cols, vals, r0, sl, block):
            block = np.atleast_2d(block)
            rr, cc = np.nonzero(block)
            rows.extend((r0 + rr).tolist())
            cols.extend((sl.start + cc).tolist())
            vals.extend(block[rr, cc].tolist())

        # x_r0 = x0
        for i in range(13):
            e_rows.append(i)
            e_cols.append(i)
            e_vals.append(1.0)
        row = 13
        for k in range(cfg.N):
            xr0 = x[self.layout.xr(k)]
            xr1 = x[self.layout.xr(k + 1)]
            om1 = xr1[10:]
            Rm = quat_right_matrix(np.concatenate([[0.0], om1]))
            B0 = np.zeros((7, 13))
            B0[:3, :3] = -np.eye(3)
            B0[3:, 3:7] = -np.eye(4) - 0.5 * dt * Rm
            B1 = np.zeros((7, 13))
            B1[:7, :7] = np.eye(7)
            B1[:3, 7:10] = -dt * np.eye(3)
            B1[3:, 10:] = -0.5 * dt * quat_rate_matrix(xr0[3:7])
            put(e_rows, e_cols, e_vals, row, self.layout.xr(k), B0)
            put(e_rows, e_cols, e_vals, row, self.layout.xr(k + 1), B1)
            row += 7
        bdata, poses = self._batch_contacts(x, level=1)
        gi = 0
        for l in range(cfg.n_s):
            sl0 = self.layout.xc(l, 0)
            for i in range(13):
                e_rows.append(row + i)
                e_cols.append(sl0.start + i)
                e_vals.append(1.0)
            row += 13
            for k in range(cfg.N):
                data = self._interval_jacobian(x, l, k, bdata, poses)
                interval_data[(l, k)] = data
                for sl, block in data["eq_blocks"]:
                    put(e_rows, e_cols, e_vals, row, sl, block)
                for sl, block in data["ineq_blocks"]:
                    put(i_rows, i_cols, i_vals, gi, sl, block)
                row += self.n_H
                gi += self.n_G
        J_e = sp.coo_matrix((e_vals, (e_rows, e_cols)),
                            shape=(self.m_e, self.n)).tocsr()
        J_i = sp.coo_matrix((i_vals, (i_rows, i_cols)),
                            shape=(self.m_i, self.n)).tocsr()
        c["x"] = x.copy()
        c["J_e"] = J_e
        c["J_i"] = J_i
        c["intervals"] = interval_data
        c["bdata"] = bdata
        self.time_other += (time.perf_counter() - t0) - (self.time_collision - coll0)

    def _interval_jacobian(self, x: Array, l: int, k: int, bdata, poses) -> dict:
        """Dense Jacobian blocks and retained data for one (scenario, interval)."""
        cfg = self.config
        dt = cfg.dt
        n_p = self.body.n_pairs
        xc0 = x[self.layout.xc(l, k)]
        xc1 = x[self.layout.xc(l, k + 1)]
        lam = x[self.layout.lam(l, k)]
        xr1 = x[self.layout.xr(k + 1)]
        base = self._item_base(l, k)
        xi_t = poses[l * cfg.N + k, 3:]
        q_t = Pose(poses[l * cfg.N + k, :3], xi_t)

        xi0 = xc0[3:7]
        Jn4 = normalize_jacobian(xi0)
        J_norm = np.zeros((7, 7))
        J_norm[:3, :3] = np.eye(3)
        J_norm[3:, 3:] = Jn4
        Qt = dynamics.kinematic_map(q_t)
        Om_t = Qt[3:, 3:] * 2.0          # Omega(xi_tilde)
        v1 = xc1[7:]

        w_blk = bdata.w[base:base + n_p]
        Dw_blk = bdata.Dq_w[base:base + n_p]
        phi = w_blk[:, 0]
        Ntil = np.empty((6, n_p))
        Ntil[:3] = w_blk[:, 1:4].T
        Ntil[3:] = 0.5 * (Om_t.T @ w_blk[:, 4:8].T)
        # d(ntilde)/d q0 per pair, chained through normalization
        Dn_til = []
        for p in range(n_p):
            Dw = Dw_blk[p]
            Dq = np.empty((6, 7))
            Dq[:3] = Dw[1:4]
            Psi = _psi_matrix(w_blk[p, 4:])
            Dq[3:] = 0.5 * (Om_t.T @ Dw[4:8])
            Dq[3:, 3:] += 0.5 * Psi
            Dn_til.append(Dq @ J_norm)
        Dphi = Dw_blk[:, 0] @ J_norm
        a = phi + dt * (Ntil.T @ v1)
        Da_q0 = Dphi + dt * np.stack([Dn_til[p].T @ v1 for p in range(n_p)])

        xhat = self._perturbed_state(xc1, l)
        U = impedance.impedance_wrench(xr1, xhat, self.gains)
        Jr_imp, Jc_imp = impedance.wrench_jacobians(xr1, xhat, self.gains)
        Tp = self._perturb_jacobian(xc1, l)

        # pose rows (7)
        A_xc0 = np.zeros((7, 13))
        A_xc0[:7, :7] = -np.eye(7)
        A_xc1 = np.zeros((7, 13))
        A_xc1[:7, :7] = np.eye(7)
        Rm1 = quat_right_matrix(np.concatenate([[0.0], v1[3:]]))
        A_xc1[3:, 3:7] -= 0.5 * dt * Rm1
        A_xc1[:3, 7:10] = -dt * np.eye(3)
        A_xc1[3:, 10:] = -0.5 * dt * quat_rate_matrix(xc1[3:7])

        # velocity rows (6)
        B_xc0 = np.zeros((6, 13))
        if n_p:
            B_xc0[:, :7] = -dt * sum(lam[p] * Dn_til[p] for p in range(n_p))
        B_xc0[:, 7:] = -np.diag(self.M_diag)
        B_xc1 = -dt * (Jc_imp @ Tp)
        B_xc1[:, 7:] += np.diag(self.M_diag)
        B_xr1 = -dt * Jr_imp
        B_lam = -dt * Ntil

        # complementarity / inequality rows
        C_xc0 = lam[:, None] * Da_q0 if n_p else np.zeros((0, 7))
        C_v1 = dt * (lam[:, None] * Ntil.T) if n_p else np.zeros((0, 6))

        eq_blocks = []
        ineq_blocks = []
        sl0 = self.layout.xc(l, k)
        sl1 = self.layout.xc(l, k + 1)
        slr = self.layout.xr(k + 1)
        sll = self.layout.lam(l, k)

        eqA0 = np.zeros((self.n_H, 13))
        eqA1 = np.zeros((self.n_H, 13))
        eqAr = np.zeros((self.n_H, 13))
        eqAl = np.zeros((self.n_H, n_p))
        eqA0[:7] = A_xc0
        eqA1[:7] = A_xc1
        eqA0[7:13] = B_xc0
        eqA1[7:13] = B_xc1
        eqAr[7:13] = B_xr1
        eqAl[7:13] = B_lam
        if self.smoothing:
            eqA0[13:, :7] = C_xc0
            eqA1[13:, 7:] = C_v1
            eqAl[13:] = np.diag(a)
        eq_blocks = [(sl0, eqA0), (sl1, eqA1), (slr, eqAr), (sll, eqAl)]

        inA0 = np.zeros((self.n_G, 13))
        inA1 = np.zeros((self.n_G, 13))
        inAl = np.zeros((self.n_G, n_p))
        inA0[:n_p, :7] = -Da_q0
        inA1[:n_p, 7:] = -dt * Ntil.T
        inAl[n_p:2 * n_p] = -np.eye(n_p)
        if not self.smoothing:
            inA0[2 * n_p:, :7] = C_xc0
            inA1[2 * n_p:, 7:] = C_v1
            inAl[2 * n_p:] += np.diag(a)
        ineq_blocks = [(sl0, inA0), (sl1, inA1), (sll, inAl)]

        return dict(eq_blocks=eq_blocks, ineq_blocks=ineq_blocks, base=base, sl0=sl0,
                    q_t=q_t, J_norm=J_norm, Jn4=Jn4, Qt=Qt, Ntil=Ntil, Dn_til=Dn_til,
                    a=a, Da_q0=Da_q0, phi=phi, v1=v1, lam=lam, U=U, Tp=Tp,
                    Jr_imp=Jr_imp, Jc_imp=Jc_imp, xhat=xhat, xr1=xr1, xc1=xc1, xc0=xc0)

    def _perturb_jacobian(self, xc: Array, l: int) -> Array:
        """Jacobian of the perturbed state map (13x13)."""
        qh = self.offsets[l]
        xi = xc[3:7]
        Jn4 = normalize_jacobian(xi)
        u = xi / np.linalg.norm(xi)
        S = self._S
        B = 2.0 * np.einsum("mnrs,s,n->mr", S, u, qh.rho)
        Tp = np.zeros((13, 13))
        Tp[:3, :3] = np.eye(3)
        Tp[:3, 3:7] = B @ Jn4
        Tp[3:7, 3:7] = quat_right_matrix(qh.xi) @ Jn4
        Tp[7:, 7:] = np.eye(6)
        return Tp

    def _perturb_curvature(self, xc: Array, l: int, w13: Array) -> Array:
        """<w13, D^2 perturbed-state> over the quaternion block (4x4)."""
        qh = self.offsets[l]
        xi = xc[3:7]
        Jn4 = normalize_jacobian(xi)
        u = xi / np.linalg.norm(xi)
        S = self._S
        S_wrho = np.einsum("m,n,mnrs->rs", w13[:3], qh.rho, S)
        H = Jn4.T @ (2.0 * S_wrho) @ Jn4
        H += normalize_hessian_weighted(xi, 2.0 * (S_wrho @ u))
        H += normalize_hessian_weighted(xi, quat_right_matrix(qh.xi).T @ w13[3:7])
        return H

    # ---------- exact Lagrangian Hessian ----------

    def lag_hess(self, x: Array, y: Array, z: Array) -> sp.csr_matrix:
        self._ensure_jacobians(x)
        t0 = time.perf_counter()
        cfg = self.config
        dt = cfg.dt
        n_p = self.body.n_pairs
        rows, cols, vals = [], [], []

        def add_block(slr, slc, block):
            block = np.atleast_2d(block)
            rr, cc = np.nonzero(block)
            rows.extend((slr.start + rr).tolist())
            cols.extend((slc.start + cc).tolist())
            vals.extend(block[rr, cc].tolist())

        # reference integration curvature
        row = 13
        for k in range(cfg.N):
            mu = y[row:row + 7]
            xr0 = x[self.layout.xr(k)]
            Cx = _cross_hessian_quat_omega(mu[3:], dt)       # (4, 3)
            sl_q = self.layout.xr(k)
            sl_v = self.layout.xr(k + 1)
            blk = np.zeros((13, 13))
            blk[3:7, 10:] = Cx
            add_block(sl_q, sl_v, blk)
            add_block(sl_v, sl_q, blk.T)
            row += 7
        bdata = self._jac_cache["bdata"]
        n_items = cfg.n_s * cfg.N * n_p
        seeds = np.zeros((n_items, 8))
        ctxs = {}
        gi = 0
        for l in range(cfg.n_s):
            row += 13
            for k in range(cfg.N):
                data = self._jac_cache["intervals"][(l, k)]
                mu_A = y[row:row + 7]
                mu_B = y[row + 7:row + 13]
                mu_C = y[row + 13:row + self.n_H] if self.smoothing else np.zeros(n_p)
                z_a = z[gi:gi + n_p]
                z_c = z[gi + 2 * n_p:gi + 3 * n_p] if not self.smoothing else np.zeros(n_p)
                ctx = self._interval_hessian_prepare(l, k, data, mu_A, mu_B, mu_C,
                                                     z_a, z_c, add_block)
                seeds[data["base"]:data["base"] + n_p] = ctx["seeds"]
                ctxs[(l, k)] = ctx
                row += self.n_H
                gi += self.n_G
        t1 = time.perf_counter()
        Hw_all = collision.batch_hessian_seeds(bdata, seeds)
        t_coll = time.perf_counter() - t1
        for (l, k), ctx in ctxs.items():
            data = self._jac_cache["intervals"][(l, k)]
            self._interval_hessian_finish(data, ctx, bdata, Hw_all, add_block)
        H = sp.coo_matrix((vals, (rows, cols)), shape=(self.n, self.n)).tocsr()
        H = H + self._cost_hessian(x, gn=False)
        self.time_other += time.perf_counter() - t0 - t_coll
        self.time_collision += t_coll
        return H

    def _interval_hessian_prepare(self, l, k, data, mu_A, mu_B, mu_C, z_a, z_c,
                                  add_block):
        """Non-collision curvature blocks plus the per-pair Hessian seeds."""
        cfg = self.config
        dt = cfg.dt
        n_p = self.body.n_pairs
        sl0 = self.layout.xc(l, k)
        sl1 = self.layout.xc(l, k + 1)
        slr = self.layout.xr(k + 1)
        sll = self.layout.lam(l, k)
        Qt = data["Qt"]
        Ntil, Dn_til = data["Ntil"], data["Dn_til"]
        lam, v1 = data["lam"], data["v1"]
        xc1, xr1, xhat = data["xc1"], data["xr1"], data["xhat"]
        Tp, Jc_imp = data["Tp"], data["Jc_imp"]

        # pose-update bilinear curvature: cross (xi1, omega1) within xc1
        Cx = _cross_hessian_quat_omega(mu_A[3:], dt)
        blk = np.zeros((13, 13))
        blk[3:7, 10:] = Cx
        add_block(sl1, sl1, blk + blk.T)

        # impedance curvature
        u_seed = -dt * mu_B
        H_imp = impedance.wrench_hessian(xr1, xhat, self.gains, u_seed)
        add_block(slr, slr, H_imp[:13, :13])
        cross = H_imp[:13, 13:] @ Tp
        add_block(slr, sl1, cross)
        add_block(sl1, slr, cross.T)
        grad_hat = Jc_imp.T @ u_seed          # d(u_seed . U)/d xhat
        Hc = Tp.T @ H_imp[13:, 13:] @ Tp
        Hc[3:7, 3:7] += self._perturb_curvature(xc1, l, grad_hat)
        add_block(sl1, sl1, Hc)

        # seeds and first-derivative cross blocks of the contact terms
        kappa = mu_C * lam - z_a + z_c * lam
        chi = mu_C + z_c
        c_us = Qt @ u_seed
        c_v1 = Qt @ v1
        seeds = np.empty((n_p, 8))
        seeds[:, 0] = kappa
        seeds[:, 1:] = lam[:, None] * c_us[None, :] + (kappa * dt)[:, None] * c_v1[None, :]
        blk01 = np.zeros((13, 13))
        blk0l = np.zeros((13, n_p))
        blk1l = np.zeros((13, n_p))
        for p in range(n_p):
            blk01[:7, 7:] += (kappa[p] * dt) * Dn_til[p].T
            blk0l[:7, p] = Dn_til[p].T @ u_seed + chi[p] * data["Da_q0"][p]
            blk1l[7:, p] = chi[p] * dt * Ntil[:, p]
        add_block(sl0, sl1, blk01)
        add_block(sl1, sl0, blk01.T)
        add_block(sl0, sll, blk0l)
        add_block(sll, sl0, blk0l.T)
        add_block(sl1, sll, blk1l)
        add_block(sll, sl1, blk1l.T)
        Rm_us = quat_right_matrix(np.concatenate([[0.0], u_seed[3:]]))
        Rm_v1 = quat_right_matrix(np.concatenate([[0.0], v1[3:]]))
        return dict(seeds=seeds, lam=lam, kappa=kappa, Rm_us=Rm_us, Rm_v1=Rm_v1)

    def _interval_hessian_finish(self, data, ctx, bdata, Hw_all, add_block):
        """Chain the batched collision Hessians through the normalization."""
        dt = self.config.dt
        n_p = self.body.n_pairs
        base = data["base"]
        J_norm = data["J_norm"]
        xi0 = data["xc0"][3:7]
        lam, kappa = ctx["lam"], ctx["kappa"]
        Rm_us, Rm_v1 = ctx["Rm_us"], ctx["Rm_v1"]
        seeds = ctx["seeds"]
        H_q0 = np.zeros((7, 7))
        grad_tilde = np.zeros(7)
        for p in range(n_p):
            item = base + p
            Dw = bdata.Dq_w[item]
            n_xi = bdata.w[item, 4:]
            coef = lam[p] * Rm_us + (kappa[p] * dt) * Rm_v1
            X = np.zeros((7, 7))
            X[:, 3:] = 0.5 * Dw[4:8].T @ coef
            H_q0 += Hw_all[item] + X + X.T
            grad_tilde += seeds[p] @ Dw
            grad_tilde[3:] += 0.5 * (coef.T @ n_xi)
        Hq0 = J_norm.T @ H_q0 @ J_norm
        Hq0[3:, 3:] += normalize_hessian_weighted(xi0, grad_tilde[3:])
        blk00 = np.zeros((13, 13))
        blk00[:7, :7] = Hq0
        add_block(data["sl0"], data["sl0"], blk00)


def build_ocp(config: OcpConfig, body: BodySpec) -> tuple[OcpProblem, DecisionLayout]:
    """Transcribed problem plus its decision-variable layout."""
    problem = OcpProblem(config, body)
    return problem, problem.layout


def initial_guess(problem: OcpProblem) -> Array:
    """Trivial start: all states at their initial values, zero velocities,
    forces interior for the smoothed complementarities."""
    cfg = problem.config
    lay = problem.layout
    x = np.zeros(problem.n)
    for k in range(cfg.N + 1):
        x[lay.xr(k)] = np.concatenate([cfg.x0[:7], np.zeros(6)])
        for l in range(cfg.n_s):
            x[lay.xc(l, k)] = np.concatenate([problem._x_c0[l][:7], np.zeros(6)])
    settings = problem._ip_settings()
    for l in range(cfg.n_s):
        q0 = problem._x_c0[l][:7]
        q_t = Pose(q0[:3], q0[3:] / np.linalg.norm(q0[3:]))
        lam0 = np.empty(problem.body.n_pairs)
        for p, pair in enumerate(problem.pairs):
            gamma = collision.ip_solve(collision.assemble_lp(pair, q_t), settings)
            lam0[p] = cfg.sigma_1 / max(gamma.phi, 0.01)
        for k in range(cfg.N):
            x[lay.lam(l, k)] = lam0
    return x


@dataclass
class SolveReport:
    """Per-homotopy-stage record of one interior-point solve."""

    stage: int
    tau: float
    sigma: float
    mu_init: float
    iterations: int
    converged: bool
    kkt_residual: float
    comp_residual: float
    cost: float
    terminal_errors: list          # per scenario: (translational, rotational)
    time_collision: float
    time_constraints: float
    time_solver: float
    time_total: float

    def as_dict(self) -> dict:
        return {
            "stage": self.stage, "tau": self.tau, "sigma": self.sigma,
            "mu_init": self.mu_init, "iterations": self.iterations,
            "converged": self.converged, "kkt_residual": self.kkt_residual,
            "comp_residual": self.comp_residual, "cost": self.cost,
            "terminal_errors": [
                {"scenario": i, "translational": t, "rotational": r}
                for i, (t, r) in enumerate(self.terminal_errors)],
            "timing": {
                "collision_s": self.time_collision,
                "constraints_s": self.time_constraints,
                "solver_s": self.time_solver,
                "total_s": self.time_total,
            },
        }


def _terminal_errors(problem: OcpProblem, x: Array) -> list:
    cfg = problem.config
    out = []
    for l in range(cfg.n_s):
        xN = x[problem.layout.xc(l, cfg.N)]
        t_err = float(np.linalg.norm(xN[:3] - cfg.x_goal[:3]))
        R = rotation_matrix_free(xN[3:7] / np.linalg.norm(xN[3:7]))
        r_err = float(np.linalg.norm(R - problem._R_goal, ord="fro"))
        out.append((t_err, r_err))
    return out


def comp_residual(problem: OcpProblem, x: Array) -> float:
    """max over scenarios, intervals, pairs of |a_l * lam_l|."""
    cfg = problem.config
    data, poses = problem._batch_contacts(x, level=0)
    worst = 0.0
    for l in range(cfg.n_s):
        for k in range(cfg.N):
            phi, Ntil = problem._normals_at(data, problem._item_base(l, k),
                                            poses[l * cfg.N + k, 3:])
            v1 = x[problem.layout.xc(l, k + 1)][7:]
            a = phi + cfg.dt * (Ntil.T @ v1)
            lam = x[problem.layout.lam(l, k)]
            worst = max(worst, float(np.abs(a * lam).max()))
    return worst


def homotopy_solve(config: OcpConfig, body: BodySpec,
                   x_start: Array | None = None,
                   hessian: str | None = None,
                   stage_max_iter: int | None = None,
                   callback=None):
    """Sequential solves with geometric (tau, sigma, mu_init) decrease.

    Primal and dual variables of stage n warm-start stage n+1. Returns
    (final NlpSolution, problem, [SolveReport]); a non-converged stage is
    recorded and the homotopy continues with its iterate.
    """
    problem = OcpProblem(config, body)
    hess = hessian or config.hessian
    x = initial_guess(problem) if x_start is None else x_start.copy()
    warm_y = warm_z = None
    reports = []
    sol = None
    for stage, (tau_n, sigma_n, mu_n) in enumerate(config.homotopy_schedule(), start=1):
        if stage > 1:
            # continuation in sigma. Smoothing mode: scaling the warm-started
            # forces keeps the complementarity equalities a*lam = sigma exactly
            # feasible at the tightened stage. Relaxation mode: forces are only
            # projected onto the tightened bound a*lam <= sigma, so inactive
            # rows keep their warm values.
            if config.mode == "smoothing":
                for l in range(config.n_s):
                    for k in range(config.N):
                        x[problem.layout.lam(l, k)] *= config.kappa_sigma
            # relaxation mode: the warm point violates the tightened product
            # bound by at most sigma_n on previously active rows; the solver
            # restores this directly (violated-row duals are re-centered).
        problem.set_smoothing(tau_n, sigma_n)
        c0, o0 = problem.time_collision, problem.time_other
        t0 = time.perf_counter()
        sol = nlp.solve_nlp(problem, x, mu_init=mu_n, tol=config.tol,
                            max_iter=stage_max_iter or config.max_nlp_iter,
                            hessian=hess, warm_y=warm_y, warm_z=warm_z)
        total = time.perf_counter() - t0
        d_coll = problem.time_collision - c0
        d_other = problem.time_other - o0
        reports.append(SolveReport(
            stage=stage, tau=tau_n, sigma=sigma_n, mu_init=mu_n,
            iterations=sol.stats.iterations, converged=sol.stats.converged,
            kkt_residual=sol.stats.kkt_residual,
            comp_residual=comp_residual(problem, sol.x),
            cost=sol.stats.cost, terminal_errors=_terminal_errors(problem, sol.x),
            time_collision=d_coll, time_constraints=d_other,
            time_solver=max(total - d_coll - d_other, 0.0), time_total=total))
        if callback is not None:
            callback(stage, sol, reports[-1])
        x = sol.x
        warm_y, warm_z = sol.y, sol.z
    return sol, problem, reports


def validate_solution(problem: OcpProblem, x: Array) -> dict:
    """Terminal errors, worst residuals, and a forward-rollout cross-check.

    The rollout cross-check re-simulates each scenario with the dynamics
    module at the same (tau, sigma) and reports the largest per-step state
    deviation from the transcribed compliant trajectory (smoothing mode).
    """
    cfg = problem.config
    problem._ensure_residuals(x)
    metrics = {
        "terminal_errors": _terminal_errors(problem, x),
        "max_equality_violation": float(np.abs(problem.eq(x)).max()),
        "max_inequality_violation": float(np.clip(problem.ineq(x), 0.0, None).max()),
        "max_comp_residual": comp_residual(problem, x),
    }
    if cfg.mode == "smoothing":
        model = dynamics.ContactModel(problem.body, problem._ip_settings())
        ref = np.stack([x[problem.layout.xr(k)] for k in range(cfg.N + 1)])
        worst = 0.0
        for l in range(cfg.n_s):
            x0 = x[problem.layout.xc(l, 0)]
            try:
                res = dynamics.rollout(x0, ref, problem.gains, problem.offsets[l],
                                       cfg.dt, problem.sigma, model)
            except dynamics.StepFailure as exc:
                metrics[f"rollout_failure_scenario_{l}"] = str(exc)
                continue
            for k in range(cfg.N + 1):
                dev = float(np.abs(res.states[k] - x[problem.layout.xc(l, k)]).max())
                worst = max(worst, dev)
        metrics["rollout_max_deviation"] = worst
    return metrics
