"""Frictionless discrete-time contact dynamics with smoothed complementarity.

Semi-implicit (Moreau) time stepping: the velocity update is explicit in the
applied wrench and contact impulses, the pose update is implicit, and the
gap functions are linearized at the previous (normalized) pose. The
gap-force complementarity is smoothed per pair to ``a_l * b_l = sigma``
(equality mode) or relaxed to ``a_l * b_l <= sigma``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import collision
from .geometry import (BodySpec, Pose, normalize_pose, quat_rate_matrix,
                       quat_right_matrix)

Array = np.ndarray


class StepFailure(RuntimeError):
    """A contact step solve did not converge; carries diagnostics."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


def kinematic_map(q: Pose | Array) -> Array:
    """Q(q) in R^{7x6} mapping body velocity (nu, omega) to pose rate.

    Q = blockdiag(I3, 0.5 * Omega(xi)); the quaternion need not be unit.
    """
    xi = q.xi if isinstance(q, Pose) else np.asarray(q, dtype=float).reshape(7)[3:]
    Q = np.zeros((7, 6))
    Q[:3, :3] = np.eye(3)
    Q[3:, 3:] = 0.5 * quat_rate_matrix(xi)
    return Q


@dataclass
class RelaxationMode:
    """Complementarity handling: 'smoothing' (a b = sigma) or 'relaxation' (a b <= sigma)."""

    variant: str
    sigma: float

    def __post_init__(self) -> None:
        if self.variant not in ("smoothing", "relaxation"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")

    @property
    def smoothing(self) -> bool:
        return self.variant == "smoothing"


@dataclass
class StepResiduals:
    """Equality residuals H (= 0) and inequality residuals G (<= 0) of one step."""

    H: Array
    G: Array


class ContactModel:
    """Bundles a body with its pair geometries and distance-solver settings."""

    def __init__(self, body: BodySpec, settings: collision.IpSettings):
        self.body = body
        self.settings = settings
        self.pairs = collision.build_pair_geometries(
            body.actuated, body.environment, body.pairs)
        self.M_inv = body.mass_matrix_inverse

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def evaluate(self, q_tilde: Pose, level: int = 0,
                 warmstarts: list | None = None, seed=0) -> list:
        """Contact info for all pairs at an already-normalized pose."""
        return collision.batch_contact_info(
            self.pairs, [q_tilde] * len(self.pairs), self.settings,
            level=level, warmstarts=warmstarts, batch_seed=seed)


def velocity_space_normals(contacts: list, q_tilde: Pose) -> tuple[Array, Array]:
    """(phi, N_tilde) with N_tilde columns Q(q_tilde)^T n_p in velocity space."""
    Q = kinematic_map(q_tilde)
    phi = np.array([c.phi for c in contacts])
    N = np.column_stack([Q.T @ c.normal for c in contacts]) if contacts else np.zeros((6, 0))
    return phi, N


def step_residuals(x_k: Array, x_next: Array, U: Array, lam: Array,
                   contacts: list, dt: float, mode: RelaxationMode,
                   body: BodySpec) -> StepResiduals:
    """Residuals of one semi-implicit step given contact info at q~_k.

    H stacks the implicit pose update, the velocity update, and (in smoothing
    mode) the complementarity equalities a_l lam_l - sigma; G stacks -a <= 0,
    -lam <= 0, and in relaxation mode additionally a_l lam_l - sigma <= 0.
    """
    x_k = np.asarray(x_k, dtype=float).reshape(13)
    x_next = np.asarray(x_next, dtype=float).reshape(13)
    lam = np.asarray(lam, dtype=float).reshape(-1)
    q_tilde = normalize_pose(Pose(x_k[:3], x_k[3:7]))
    phi, N = velocity_space_normals(contacts, q_tilde)
    v_next = x_next[7:]
    Q_next = kinematic_map(x_next[:7])
    h_pose = x_next[:7] - x_k[:7] - dt * (Q_next @ v_next)
    h_vel = v_next - x_k[7:] - dt * (body.mass_matrix_inverse @ (U + N @ lam))
    a = phi + dt * (N.T @ v_next)
    if mode.smoothing:
        H = np.concatenate([h_pose, h_vel, a * lam - mode.sigma])
        G = np.concatenate([-a, -lam])
    else:
        H = np.concatenate([h_pose, h_vel])
        G = np.concatenate([-a, -lam, a * lam - mode.sigma])
    return StepResiduals(H=H, G=G)


def integrate_pose_implicit(q_k: Array, v_next: Array, dt: float) -> Array:
    """Solve q_next = q_k + dt Q(q_next) v_next (linear in the quaternion)."""
    rho = q_k[:3] + dt * v_next[:3]
    omega_quat = np.concatenate([[0.0], v_next[3:]])
    M4 = np.eye(4) - 0.5 * dt * quat_right_matrix(omega_quat)
    xi = np.linalg.solve(M4, q_k[3:])
    return np.concatenate([rho, xi])


def _solve_forces(phi: Array, N: Array, v_k: Array, dt: float, sigma: float,
                  M_inv: Array, u_fn, q_k: Array, max_iter: int = 100):
    """Newton solve of the coupled velocity/force/complementarity system.

    Unknowns are (v_next, lam). The applied wrench may depend on the next
    state (implicit impedance), handled by finite-difference columns; the
    contact data is frozen at the previous pose, so residuals are cheap.
    """
    n_p = phi.shape[0]

    def wrench(v: Array) -> Array:
        return u_fn(np.concatenate([integrate_pose_implicit(q_k, v, dt), v]))

    v = v_k.copy()
    U0 = wrench(v)
    v_free = v_k + dt * (M_inv @ U0)
    a0 = phi + dt * (N.T @ v_free)
    D = dt * dt * (N.T @ (M_inv @ N))
    lam = np.empty(n_p)
    for p in range(n_p):
        dpp = max(D[p, p], 1e-16)
        lam[p] = (-a0[p] + np.sqrt(a0[p] ** 2 + 4.0 * dpp * sigma)) / (2.0 * dpp)
    v = v_free + dt * (M_inv @ (N @ lam))

    def residual(v: Array, lam: Array) -> Array:
        a = phi + dt * (N.T @ v)
        return np.concatenate([
            v - v_k - dt * (M_inv @ (wrench(v) + N @ lam)),
            a * lam - sigma,
        ])

    for _ in range(max_iter):
        r = residual(v, lam)
        if float(np.abs(r).max()) <= 1e-12:
            break
        a = phi + dt * (N.T @ v)
        # Jacobian: wrench columns by central differences, the rest analytic.
        dUdv = np.empty((6, 6))
        h = 1e-7
        for m in range(6):
            e = np.zeros(6)
            e[m] = h
            dUdv[:, m] = (wrench(v + e) - wrench(v - e)) / (2.0 * h)
        J = np.zeros((6 + n_p, 6 + n_p))
        J[:6, :6] = np.eye(6) - dt * (M_inv @ dUdv)
        J[:6, 6:] = -dt * (M_inv @ N)
        J[6:, :6] = dt * (lam[:, None] * N.T)
        J[6:, 6:] = np.diag(a)
        try:
            d = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise StepFailure(f"singular step Jacobian: {exc}") from None
        dv, dlam = d[:6], d[6:]
        # fraction-to-boundary on the interior pair (a, lam)
        da = dt * (N.T @ dv)
        alpha = 1.0
        for (x, dx) in ((a, da), (lam, dlam)):
            neg = dx < 0.0
            if np.any(neg):
                alpha = min(alpha, float(0.9 * np.min(-x[neg] / dx[neg])))
        # backtracking on the residual norm
        r0 = float(np.linalg.norm(r))
        for _ in range(30):
            v_t = v + alpha * dv
            lam_t = lam + alpha * dlam
            if float(np.linalg.norm(residual(v_t, lam_t))) < (1.0 - 1e-4 * alpha) * r0:
                break
            alpha *= 0.5
        v = v + alpha * dv
        lam = lam + alpha * dlam
    else:
        raise StepFailure(f"force Newton stalled at residual "
                          f"{float(np.abs(residual(v, lam)).max()):.3e}")
    return v, lam, wrench(v)


def simulate_step(x_k: Array, U_k, dt: float, sigma: float, model: ContactModel,
                  warmstarts: list | None = None, seed=0):
    """One smoothed contact step. Returns (x_next, lam, contacts, U).

    ``U_k`` is either a constant 6-vector wrench or a callable mapping the
    next state to the applied wrench (implicit impedance coupling).
    """
    x_k = np.asarray(x_k, dtype=float).reshape(13)
    q_tilde = normalize_pose(Pose(x_k[:3], x_k[3:7]))
    contacts = model.evaluate(q_tilde, level=0, warmstarts=warmstarts, seed=seed)
    for c in contacts:
        if c.failure is not None:
            raise StepFailure(f"contact evaluation failed: {c.failure}")
    phi, N = velocity_space_normals(contacts, q_tilde)
    if callable(U_k):
        u_fn = U_k
    else:
        U_const = np.asarray(U_k, dtype=float).reshape(6)
        u_fn = lambda x_next: U_const
    v_next, lam, U_final = _solve_forces(
        phi, N, x_k[7:], dt, sigma, model.M_inv, u_fn, x_k[:7])
    q_next = integrate_pose_implicit(x_k[:7], v_next, dt)
    x_next = np.concatenate([q_next, v_next])
    mode = RelaxationMode("smoothing", sigma)
    res = step_residuals(x_k, x_next, U_final, lam, contacts, dt, mode, model.body)
    if float(np.abs(res.H).max()) > 1e-9:
        raise StepFailure(f"step residual {float(np.abs(res.H).max()):.3e} > 1e-9")
    return x_next, lam, contacts, U_final


@dataclass
class RolloutResult:
    states: Array       # (N+1, 13)
    forces: Array       # (N, n_pairs)
    gaps: Array         # (N, n_pairs), Phi_tau at the step's start pose
    wrenches: Array     # (N, 6)


def rollout(x0: Array, reference: Array, gains, q_hat: Pose, dt: float,
            sigma: float, model: ContactModel, extra_wrench: Array | None = None) -> RolloutResult:
    """Forward-simulate impedance tracking of a reference trajectory.

    The compliant body is driven by the impedance wrench between the next
    reference state and the perturbed next compliant state (both normalized),
    matching the trajectory optimizer's coupling; ``extra_wrench`` adds a
    constant term (e.g. gravity compensation mismatch).
    """
    from . import impedance as imp
    from .geometry import RigidState, state_perturb

    reference = np.asarray(reference, dtype=float)
    N = reference.shape[0] - 1
    n_p = model.n_pairs
    states = np.empty((N + 1, 13))
    states[0] = np.asarray(x0, dtype=float).reshape(13)
    forces = np.empty((N, n_p))
    gaplog = np.empty((N, n_p))
    wrenches = np.empty((N, 6))
    const = np.zeros(6) if extra_wrench is None else np.asarray(extra_wrench, dtype=float)
    warm = None
    for k in range(N):
        x_ref = reference[k + 1].copy()
        x_ref[3:7] /= np.linalg.norm(x_ref[3:7])

        def u_fn(x_next: Array) -> Array:
            st = RigidState.from_vector(x_next)
            st.q = normalize_pose(st.q)
            pert = state_perturb(st, q_hat)
            return imp.impedance_wrench(x_ref, pert.as_vector(), gains) + const

        try:
            x_next, lam, contacts, _ = simulate_step(
                states[k], u_fn, dt, sigma, model, warmstarts=warm, seed=k)
        except StepFailure as exc:
            raise StepFailure(str(exc), step=k) from None
        states[k + 1] = x_next
        forces[k] = lam
        gaplog[k] = [c.phi for c in contacts]
        wrenches[k] = u_fn(x_next)
        warm = [c.gamma for c in contacts]
    return RolloutResult(states=states, forces=forces, gaps=gaplog, wrenches=wrenches)
