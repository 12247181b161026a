"""Smooth differentiable polytope collision detection.

The signed distance between a polytope attached to a moving body and a fixed
environment polytope is the optimal value of a small linear program: find the
common point ``p`` and the smallest uniform face shift ``alpha`` such that
both shifted polytopes contain ``p``. Solving the LP's KKT system only down
to a fixed barrier parameter ``tau > 0`` yields an infinitely differentiable
upper bound ``Phi_tau`` on the exact signed distance, together with a contact
normal built from the dual multipliers.

Exact first- and second-order derivatives with respect to the 7 pose
coordinates (position + free quaternion components) follow from the implicit
function theorem applied to the KKT system; the LU factorization from the
first-order solve is reused for the second-order adjoint solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import lp
from .geometry import Polytope, Pose, rotation_matrix_free, rotation_quadratic_tensor

Array = np.ndarray


class CollisionError(RuntimeError):
    """Base class for collision pipeline failures."""


class CollisionSolverFailure(CollisionError):
    """The distance solve hit its iteration limit; retry with rescaling."""


class CollisionNumericFailure(CollisionError):
    """NaN or singular linear algebra in the distance pipeline."""


class CollisionHardFailure(CollisionError):
    """All rescaled retry attempts failed; surfaced to the caller."""


@dataclass
class IpSettings:
    """Interior-point settings for the distance solves."""

    tau: float
    tol: float = 1e-10
    max_iter: int = 50
    frac_to_boundary: float = 0.995
    kappa_min: float = 1.0
    kappa_max: float = 10.0
    n_tries: int = 20

    def __post_init__(self) -> None:
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if not 0.0 < self.frac_to_boundary < 1.0:
            raise ValueError("fraction-to-boundary must lie in (0, 1)")
        if not 0.0 < self.kappa_min <= self.kappa_max:
            raise ValueError("need 0 < kappa_min <= kappa_max")


@dataclass
class DistanceLp:
    """Inequality form of one distance problem at a fixed pose."""

    A: Array          # (n_g, 4); last column is -1
    b: Array          # (n_g,)
    c: Array          # (0, 0, 0, 2)
    n_g: int
    n_top: int        # rows belonging to the actuated polytope
    p_ref: Array      # strictly interior reference point seed


@dataclass
class PrimalDual:
    """Interior primal-dual pair for a distance LP at barrier level tau."""

    z: Array          # (p, alpha)
    lam: Array        # (n_g,), strictly positive
    tau: float

    @property
    def p(self) -> Array:
        return self.z[:3]

    @property
    def alpha(self) -> float:
        return float(self.z[3])

    @property
    def phi(self) -> float:
        """Smoothed signed distance: the LP objective value 2 * alpha.

        Both polytopes are shifted by alpha, so the objective (not alpha
        itself) matches the Euclidean distance for separated face-face
        configurations and the minimal separating translation when
        penetrating. The dual-based contact normal is its gradient.
        """
        return 2.0 * float(self.z[3])


class ContactPairGeometry:
    """Pose-independent data for one (actuated, environment) polytope pair.

    Precomputes the environment constraint block, the actuated block folded
    with its body-frame offset, and the quadratic-form tensor U with
    ``A_top[l, m](xi) = xi^T U[l, m] xi`` that drives all pose derivatives.
    """

    def __init__(self, actuated: Polytope, environment: Polytope):
        off = actuated.offset_pose
        self.Gt = actuated.G @ rotation_matrix_free(off.xi).T      # (n_i, 3)
        self.c_top = actuated.h + self.Gt @ off.rho                # (n_i,)
        S = rotation_quadratic_tensor()
        self.U = np.einsum("ln,mnrs->lmrs", self.Gt, S)            # (n_i, 3, 4, 4)
        env_pose = environment.offset_pose
        W_env = environment.G @ rotation_matrix_free(env_pose.xi).T
        self.A_env = np.hstack([W_env, -np.ones((W_env.shape[0], 1))])
        self.b_env = environment.h + W_env @ env_pose.rho
        self.rho_env = env_pose.rho.copy()
        self.offset_rho = off.rho.copy()
        self.n_top = actuated.G.shape[0]
        self.n_env = environment.G.shape[0]
        self.n_g = self.n_top + self.n_env
        self.c = np.array([0.0, 0.0, 0.0, 2.0])


def build_pair_geometries(actuated: list, environment: list, pairs: list) -> list:
    """ContactPairGeometry for every (actuated index, environment index) pair."""
    return [ContactPairGeometry(actuated[i], environment[j]) for (i, j) in pairs]


def assemble_lp(pair: ContactPairGeometry, q: Pose) -> DistanceLp:
    """Constraint data A(q), b(q) of the distance LP at the given pose."""
    R = rotation_matrix_free(q.xi)
    W = pair.Gt @ R.T
    A = np.vstack([
        np.hstack([W, -np.ones((pair.n_top, 1))]),
        pair.A_env,
    ])
    b = np.concatenate([pair.c_top + W @ q.rho, pair.b_env])
    rho_world = q.rho + R @ pair.offset_rho
    p_ref = 0.5 * (rho_world + pair.rho_env)
    return DistanceLp(A=A, b=b, c=pair.c, n_g=pair.n_g, n_top=pair.n_top, p_ref=p_ref)


def _interior_start(dlp: DistanceLp) -> Array:
    alpha0 = float(np.max(dlp.A[:, :3] @ dlp.p_ref - dlp.b)) + 1.0
    return np.concatenate([dlp.p_ref, [alpha0]])


def ip_solve(dlp: DistanceLp, settings: IpSettings,
             warmstart: PrimalDual | None = None) -> PrimalDual:
    """Solve the distance LP down to the fixed barrier parameter settings.tau.

    A warm start is used when it is strictly interior for the new constraint
    data; otherwise the solve starts from the polytope midpoint seed.
    """
    if warmstart is not None:
        s_w = dlp.b - dlp.A @ warmstart.z
        if float(np.min(s_w)) > 0.0 and float(np.min(warmstart.lam)) > 0.0:
            try:
                sol = lp.solve_inequality_lp(
                    dlp.A, dlp.b, dlp.c, tau=settings.tau,
                    z0=warmstart.z.copy(), lam0=warmstart.lam,
                    tol=settings.tol, max_iter=settings.max_iter,
                    frac_to_boundary=settings.frac_to_boundary)
                return PrimalDual(z=sol.z, lam=sol.lam, tau=settings.tau)
            except lp.LpError:
                pass  # fall through to the cold start
    try:
        sol = lp.solve_inequality_lp(
            dlp.A, dlp.b, dlp.c, tau=settings.tau, z0=_interior_start(dlp),
            tol=settings.tol, max_iter=settings.max_iter,
            frac_to_boundary=settings.frac_to_boundary)
    except lp.LpIterationLimit as exc:
        raise CollisionSolverFailure(str(exc)) from exc
    except (lp.LpNumericFailure, lp.LpDiverged) as exc:
        raise CollisionNumericFailure(str(exc)) from exc
    return PrimalDual(z=sol.z, lam=sol.lam, tau=settings.tau)


def rescale_retry(pair: ContactPairGeometry, q: Pose, settings: IpSettings,
                  seed) -> PrimalDual:
    """Retry a failed distance solve on randomly row-scaled variants.

    Each attempt draws zeta ~ U[kappa_min, kappa_max]^{n_g}, solves the LP
    with rows of (A, b) multiplied by zeta, and maps the solution back to the
    original problem via z = z_tilde, lam = diag(zeta) lam_tilde, which
    preserves both stationarity and the complementarity products. The mapped
    pair is accepted when it meets the original KKT residual within 10x the
    solve tolerance.
    """
    dlp = assemble_lp(pair, q)
    rng = np.random.default_rng(seed)
    last_exc: Exception | None = None
    for _ in range(settings.n_tries):
        zeta = rng.uniform(settings.kappa_min, settings.kappa_max, size=dlp.n_g)
        A_s = dlp.A * zeta[:, None]
        b_s = dlp.b * zeta
        z0 = _interior_start(dlp)
        try:
            sol = lp.solve_inequality_lp(
                A_s, b_s, dlp.c, tau=settings.tau, z0=z0,
                tol=settings.tol, max_iter=settings.max_iter,
                frac_to_boundary=settings.frac_to_boundary)
        except lp.LpError as exc:
            last_exc = exc
            continue
        lam = zeta * sol.lam
        res = lp.kkt_residual(dlp.A, dlp.b, dlp.c, sol.z, lam, settings.tau)
        if res <= 10.0 * settings.tol:
            return PrimalDual(z=sol.z, lam=lam, tau=settings.tau)
        last_exc = CollisionSolverFailure(f"mapped-back residual {res:.3e} too large")
    raise CollisionHardFailure(
        f"distance solve failed after {settings.n_tries} rescaled attempts "
        f"(last: {last_exc})")


@dataclass
class FirstDerivatives:
    """Jacobians from the implicit function theorem, plus the retained
    factorization and pose-local tensors reused by the second-order pass."""

    Dq_gamma: Array   # (4 + n_g, 7)
    Dq_w: Array       # (8, 7)
    # retained workspace
    lu: tuple = field(repr=False, default=None)
    A: Array = field(repr=False, default=None)
    lam: Array = field(repr=False, default=None)
    D1: Array = field(repr=False, default=None)    # (n_top, 7)
    D2: Array = field(repr=False, default=None)    # (n_top, 7, 7)
    DZ1: Array = field(repr=False, default=None)   # (n_top, 4, 7)
    U: Array = field(repr=False, default=None)     # (n_top, 3, 4, 4)
    dgw: Array = field(repr=False, default=None)   # (8, 4 + n_g)
    n_top: int = 0


def _pose_local_tensors(pair: ContactPairGeometry, gamma: PrimalDual, q: Pose):
    """First/second partials of the actuated constraint rows g_l(z, q)."""
    xi = q.xi
    U = pair.U
    n_i = pair.n_top
    Uxi = (U.reshape(n_i * 12, 4) @ xi).reshape(n_i, 3, 4)
    W = (Uxi.reshape(n_i * 3, 4) @ xi).reshape(n_i, 3)
    P = gamma.p - q.rho
    D1 = np.empty((n_i, 7))
    D1[:, :3] = -W
    D1[:, 3:] = 2.0 * np.tensordot(Uxi, P, axes=([1], [0]))
    DZ1 = np.zeros((n_i, 4, 7))
    DZ1[:, :3, 3:] = 2.0 * Uxi
    D2 = np.zeros((n_i, 7, 7))
    D2[:, :3, 3:] = -2.0 * Uxi
    D2[:, 3:, :3] = np.transpose(D2[:, :3, 3:], (0, 2, 1))
    D2[:, 3:, 3:] = 2.0 * np.tensordot(U, P, axes=([1], [0]))
    return D1, DZ1, D2


def _first_order_rows(pair: ContactPairGeometry, gamma: PrimalDual, q: Pose) -> Array:
    """d g_l / d q for the actuated rows only (n_top, 7)."""
    xi = q.xi
    U = pair.U
    n_i = pair.n_top
    Uxi = (U.reshape(n_i * 12, 4) @ xi).reshape(n_i, 3, 4)
    P = gamma.p - q.rho
    D1 = np.empty((n_i, 7))
    D1[:, :3] = -(Uxi.reshape(n_i * 3, 4) @ xi).reshape(n_i, 3)
    D1[:, 3:] = 2.0 * np.tensordot(Uxi, P, axes=([1], [0]))
    return D1


def contact_info_vector(pair: ContactPairGeometry, gamma: PrimalDual, q: Pose) -> Array:
    """Nominal contact information w = (Phi_tau, n_tau) with n = d_q g(z, q)^T lam.

    Phi_tau is the LP objective value 2 * alpha_tau, whose pose gradient the
    dual-based normal approximates. Only the actuated rows of g depend on the
    pose, so the normal is the lam-weighted sum of their pose gradients
    (equivalently -d_q F^T (0, 1)).
    """
    D1 = _first_order_rows(pair, gamma, q)
    n = D1.T @ gamma.lam[:pair.n_top]
    return np.concatenate([[gamma.phi], n])


def first_derivatives(pair: ContactPairGeometry, gamma: PrimalDual,
                      q: Pose) -> FirstDerivatives:
    """D_q gamma and D_q w by the implicit function theorem.

    Solves d_gamma F . D_q gamma = -d_q F through one LU factorization, which
    is retained for the adjoint solve of :func:`second_derivatives`.
    """
    dlp = assemble_lp(pair, q)
    A, b = dlp.A, dlp.b
    lam = gamma.lam
    s = b - A @ gamma.z
    n_g, n_top = pair.n_g, pair.n_top
    lam_top = lam[:n_top]
    D1, DZ1, D2 = _pose_local_tensors(pair, gamma, q)

    dFq = np.zeros((4 + n_g, 7))
    dFq_top = np.tensordot(lam_top, DZ1, axes=(0, 0))
    dFq[:4] = dFq_top
    dFq[4:4 + n_top] = -lam_top[:, None] * D1

    K = np.zeros((4 + n_g, 4 + n_g))
    K[:4, 4:] = A.T
    K[4:, :4] = -lam[:, None] * A
    K[4:, 4:] = np.diag(s)
    try:
        lu = scipy.linalg.lu_factor(K, check_finite=False)
        Dq_gamma = scipy.linalg.lu_solve(lu, -dFq, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise CollisionNumericFailure(f"singular KKT matrix: {exc}") from exc
    if not np.all(np.isfinite(Dq_gamma)):
        raise CollisionNumericFailure("non-finite primal-dual Jacobian")

    dgw = np.zeros((8, 4 + n_g))
    dgw[0, 3] = 2.0  # w[0] = Phi = 2 * alpha
    dgw[1:, :4] = dFq_top.T
    dgw[1:, 4:4 + n_top] = D1.T
    dqw = np.zeros((8, 7))
    dqw[1:] = np.tensordot(lam_top, D2, axes=(0, 0))
    Dq_w = dgw @ Dq_gamma + dqw

    return FirstDerivatives(Dq_gamma=Dq_gamma, Dq_w=Dq_w, lu=lu, A=A, lam=lam,
                            D1=D1, D2=D2, DZ1=DZ1, U=pair.U, dgw=dgw, n_top=n_top)


def second_derivatives(fd: FirstDerivatives, s_w: Array) -> Array:
    """Directional Hessian <s_w, D^2_q w> as a symmetric 7x7 matrix.

    Implements the five-term chain-rule sum for w plus the adjoint-based
    directional Hessian of the primal-dual variables, reusing the retained
    LU factors of d_gamma F.
    """
    n_top = fd.n_top
    n_g = fd.A.shape[0]
    lam_top = fd.lam[:n_top]
    U, D1, D2, DZ1 = fd.U, fd.D1, fd.D2, fd.DZ1
    Dq_gamma = fd.Dq_gamma
    Dz = Dq_gamma[:4]
    Dlam = Dq_gamma[4:]
    s_n = np.asarray(s_w, dtype=float)[1:]

    s_gamma = fd.dgw.T @ np.asarray(s_w, dtype=float)
    try:
        r = scipy.linalg.lu_solve(fd.lu, -s_gamma, trans=1, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise CollisionNumericFailure(f"singular adjoint system: {exc}") from exc
    r_z, r_lam = r[:4], r[4:]

    # lam-weighted tensor sum_l lam_l U[l], reused by several contractions
    T_lamU = np.tensordot(lam_top, U, axes=(0, 0))        # (3, 4, 4)

    # <s_w, d^2_qq w>
    H = np.zeros((7, 7))
    M_rho_xi = -2.0 * np.tensordot(T_lamU, s_n[3:], axes=([1], [0]))   # (3, 4)
    H[:3, 3:] += M_rho_xi
    H[3:, :3] += M_rho_xi.T
    H[3:, 3:] += -2.0 * np.tensordot(s_n[:3], T_lamU, axes=(0, 0))

    # <s_w, d^2_{q gamma} w> D_q gamma, plus its transpose
    Hqg = np.zeros((7, 4 + n_g))
    Hqg[3:, :3] = 2.0 * np.tensordot(T_lamU, s_n[3:], axes=([2], [0])).T  # (4, 3)
    Hqg[:, 4:4 + n_top] = np.tensordot(D2, s_n, axes=([2], [0])).T
    T = Hqg @ Dq_gamma
    H += T + T.T

    # D_q gamma^T <s_w, d^2_gamma w> D_q gamma (only z-lambda cross blocks)
    B = np.zeros((4, n_g))
    B[:, :n_top] = np.tensordot(DZ1, s_n, axes=([2], [0])).T
    T4 = Dz.T @ B @ Dlam
    H += T4 + T4.T

    # <s_gamma, D^2_q gamma> via the adjoint variable r
    omega = r_lam[:n_top] * lam_top
    HFqq = np.zeros((7, 7))
    HFqq[3:, 3:] += 2.0 * np.tensordot(r_z[:3], T_lamU, axes=(0, 0))
    HFqq -= np.tensordot(omega, D2, axes=(0, 0))
    HFgq = np.zeros((4 + n_g, 7))
    HFgq[:4] = -np.tensordot(omega, DZ1, axes=(0, 0))
    HFgq[4:4 + n_top] = np.tensordot(r_z, DZ1, axes=([0], [1])) - r_lam[:n_top, None] * D1
    B2 = -(fd.A.T * r_lam[None, :])
    T5 = HFgq.T @ Dq_gamma
    T6 = Dz.T @ B2 @ Dlam
    H += HFqq + T5 + T5.T + T6 + T6.T
    return H


@dataclass
class ContactInfo:
    """Contact record: w = (Phi_tau, n_tau) plus optional derivative bundles."""

    w: Array
    jacobian: Array | None = None
    gamma: PrimalDual | None = None
    deriv: FirstDerivatives | None = field(default=None, repr=False)
    failure: str | None = None

    @property
    def phi(self) -> float:
        return float(self.w[0])

    @property
    def normal(self) -> Array:
        return self.w[1:]

    def hessian(self, s_w: Array) -> Array:
        if self.deriv is None:
            raise CollisionError("contact info was evaluated without second-order data")
        return second_derivatives(self.deriv, s_w)


def evaluate_contact(pair: ContactPairGeometry, q: Pose, settings: IpSettings,
                     level: int = 1, warmstart: PrimalDual | None = None,
                     rescale_seed=0) -> ContactInfo:
    """Nominal contact info at a pose, with derivatives up to the given level.

    level 0: w only; level 1: + Jacobian; level 2: + directional Hessians on
    demand. Failed solves fall back to the rescaling retry before giving up.
    """
    dlp = assemble_lp(pair, q)
    try:
        gamma = ip_solve(dlp, settings, warmstart)
    except (CollisionSolverFailure, CollisionNumericFailure):
        gamma = rescale_retry(pair, q, settings, rescale_seed)
    if level == 0:
        return ContactInfo(w=contact_info_vector(pair, gamma, q), gamma=gamma)
    fd = first_derivatives(pair, gamma, q)
    w = contact_info_vector(pair, gamma, q)
    return ContactInfo(w=w, jacobian=fd.Dq_w, gamma=gamma,
                       deriv=fd if level >= 2 else None)


def batch_contact_info(pairs: list, poses: list, settings: IpSettings,
                       level: int = 1, warmstarts: list | None = None,
                       batch_seed: int = 0) -> list:
    """Evaluate contact info for items = zip(pairs, poses) sequentially.

    Results are identical to per-item calls; the rescale RNG is seeded per
    item from (batch_seed, index) so any evaluation order agrees bit-for-bit.
    Per-item failures are recorded on the returned entries instead of
    aborting the batch.
    """
    out = []
    for idx, (pair, q) in enumerate(zip(pairs, poses)):
        warm = warmstarts[idx] if warmstarts is not None else None
        try:
            info = evaluate_contact(pair, q, settings, level=level,
                                    warmstart=warm, rescale_seed=(batch_seed, idx))
        except CollisionError as exc:
            info = ContactInfo(w=np.full(8, np.nan), failure=str(exc))
        out.append(info)
    return out


def barrier_objective(dlp: DistanceLp, z: Array, tau: float) -> float:
    """Log-barrier objective B_tau(z, q) = c^T z - tau * sum log(b - A z)."""
    s = dlp.b - dlp.A @ z
    if np.min(s) <= 0.0:
        return np.inf
    return float(dlp.c @ z - tau * np.sum(np.log(s)))


def point_polytope_2d(G: Array, h: Array, point: Array, tau: float,
                      tol: float = 1e-13) -> tuple[float, Array]:
    """Smoothed 2D point-polytope distance and its gradient approximation.

    The point variant fixes p to the query point, so only the face shift
    remains free (and no factor of two enters the cost): the barrier solution
    solves sum_l tau / (h_l - G_l p + alpha) = 1 for the unique alpha keeping
    all slacks positive. Returns (Phi_tau, n_tau) with n_tau = G^T lam.
    """
    viol = G @ point - h
    a_min = float(np.max(viol))
    lo = a_min + 1e-3 * tau
    hi = a_min + h.shape[0] * tau + 1.0
    alpha = a_min + h.shape[0] * tau

    def psi(a: float):
        s = a - viol
        t = tau / s
        return float(np.sum(t)) - 1.0, -float(np.sum(t / s))

    if not (lo < alpha < hi):
        alpha = 0.5 * (lo + hi)
    for _ in range(100):
        val, dval = psi(alpha)
        if abs(val) <= tol:
            break
        step = -val / dval
        new = alpha + step
        if not (lo < new < hi):
            new = 0.5 * (lo + hi)
        if val > 0.0:
            lo = alpha
        else:
            hi = alpha
        alpha = new
    lam = tau / (alpha - viol)
    return alpha, G.T @ lam


def sdf_grid_2d(G: Array, h: Array, xs: Array, ys: Array, tau: float) -> Array:
    """Sample the 2D smoothed distance field on a grid.

    Returns rows (x, y, phi, n_x, n_y) in row-major y-outer order, ready for
    CSV emission of level-line and gradient-field figures.
    """
    rows = np.empty((len(ys) * len(xs), 5))
    k = 0
    for y in ys:
        for x in xs:
            phi, n = point_polytope_2d(G, h, np.array([x, y]), tau)
            rows[k] = (x, y, phi, n[0], n[1])
            k += 1
    return rows


# ---------------------------------------------------------------------------
# Vectorized evaluation across many (pose, pair) items.
#
# The trajectory optimizer evaluates every (scenario, interval, pair) distance
# problem at each solver iteration; stacking items with equal constraint
# counts lets the whole sweep run through batched linear algebra. Items that
# fail to converge in the batched loop fall back to the robust scalar path.
# ---------------------------------------------------------------------------


class BatchContactData:
    """Stacked results of a batched distance sweep (one row per item)."""

    def __init__(self, n_items: int, n_g: int):
        self.z = np.empty((n_items, 4))
        self.lam = np.empty((n_items, n_g))
        self.w = np.empty((n_items, 8))
        self.Dq_w = None          # (n_items, 8, 7) at level >= 1
        self.K = None             # (n_items, 4 + n_g, 4 + n_g)
        self.Dq_gamma = None      # (n_items, 4 + n_g, 7)
        self.dgw = None           # (n_items, 8, 4 + n_g)
        self.D1 = None
        self.DZ1 = None
        self.D2 = None
        self.Uxi = None
        self.n_top = 0

    @property
    def phi(self):
        return self.w[:, 0]


def _batch_rotation(xis: Array) -> Array:
    """Homogeneous rotation matrices for a stack of quaternions (B, 3, 3)."""
    w, x, y, z = xis[:, 0], xis[:, 1], xis[:, 2], xis[:, 3]
    ww, xx, yy, zz = w * w, x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    R = np.empty((xis.shape[0], 3, 3))
    R[:, 0, 0] = ww + xx - yy - zz
    R[:, 0, 1] = 2.0 * (xy - wz)
    R[:, 0, 2] = 2.0 * (xz + wy)
    R[:, 1, 0] = 2.0 * (xy + wz)
    R[:, 1, 1] = ww - xx + yy - zz
    R[:, 1, 2] = 2.0 * (yz - wx)
    R[:, 2, 0] = 2.0 * (xz - wy)
    R[:, 2, 1] = 2.0 * (yz + wx)
    R[:, 2, 2] = ww - xx - yy + zz
    return R


def batch_assemble(pairs: list, pose_idx: Array, poses: Array):
    """Stacked (A, b, p_ref) for items (pose_idx[i], pair i % len(pairs)).

    ``poses`` is (n_poses, 7) with unit quaternions; item i uses pose
    ``poses[pose_idx[i]]`` and pair ``pairs[i % n_pairs]`` (interval-major
    ordering: all pairs of item 0's interval first).
    """
    n_pairs = len(pairs)
    n_items = pose_idx.shape[0]
    n_g = pairs[0].n_g
    if any(p.n_g != n_g or p.n_top != pairs[0].n_top for p in pairs):
        raise CollisionError("batched assembly requires equal constraint counts")
    n_top = pairs[0].n_top
    R = _batch_rotation(poses[:, 3:])            # (n_poses, 3, 3)
    rho = poses[:, :3]
    A = np.empty((n_items, n_g, 4))
    b = np.empty((n_items, n_g))
    p_ref = np.empty((n_items, 3))
    A[:, :, 3] = -1.0
    for p, pair in enumerate(pairs):
        sel = slice(p, n_items, n_pairs)
        idx = pose_idx[sel]
        W = np.einsum("ln,bmn->blm", pair.Gt, R[idx])
        A[sel, :n_top, :3] = W
        A[sel, n_top:, :3] = pair.A_env[:, :3]
        b[sel, :n_top] = pair.c_top + np.einsum("blm,bm->bl", W, rho[idx])
        b[sel, n_top:] = pair.b_env
        rho_world = rho[idx] + np.einsum("bmn,n->bm", R[idx], pair.offset_rho)
        p_ref[sel] = 0.5 * (rho_world + pair.rho_env)
    return A, b, p_ref


def batch_ip_solve(A: Array, b: Array, c: Array, p_ref: Array, tau: float,
                   warm_z: Array | None = None, warm_lam: Array | None = None,
                   tol: float = 1e-10, max_iter: int = 60,
                   frac: float = 0.995) -> tuple[Array, Array, Array]:
    """Vectorized fixed-barrier solve of a stack of distance LPs.

    Returns (z, lam, converged mask). Warm starts are used per item when
    strictly interior. Items still unconverged after ``max_iter`` are left
    for the caller's scalar fallback.
    """
    n_items, n_g, _ = A.shape
    At = np.ascontiguousarray(np.transpose(A, (0, 2, 1)))
    alpha0 = (np.einsum("bgm,bm->bg", A[:, :, :3], p_ref) - b).max(axis=1) + 1.0
    z = np.concatenate([p_ref, alpha0[:, None]], axis=1)
    s = b - np.einsum("bgm,bm->bg", A, z)
    lam = np.maximum(tau, 1.0) / s
    if warm_z is not None:
        s_w = b - np.einsum("bgm,bm->bg", A, warm_z)
        good = (s_w.min(axis=1) > 0.0) & (warm_lam.min(axis=1) > 0.0)
        z[good] = warm_z[good]
        s[good] = s_w[good]
        lam[good] = warm_lam[good]
    active = np.ones(n_items, dtype=bool)
    for _ in range(max_iter):
        r_dual = c + np.einsum("bmg,bg->bm", At, lam)
        comp = lam * s
        res = np.maximum(np.abs(r_dual).max(axis=1), np.abs(comp - tau).max(axis=1))
        bad = ~np.isfinite(res)
        res = np.where(bad, np.inf, res)
        active = res > tol
        if not active.any():
            return z, lam, np.ones(n_items, dtype=bool)
        ia = np.flatnonzero(active)
        Aa, Ata, ba = A[ia], At[ia], b[ia]
        za, sa, la = z[ia], s[ia], lam[ia]
        compa = comp[ia]
        d = la / sa
        H = Ata @ (Aa * d[:, :, None])
        try:
            Hinv = np.linalg.inv(H)
        except np.linalg.LinAlgError:
            break
        dz_a = -np.einsum("bmn,n->bm", Hinv, c)
        ds_a = -np.einsum("bgm,bm->bg", Aa, dz_a)
        dlam_a = -(la + d * ds_a)
        m_p = (ds_a / sa).min(axis=1)
        m_d = (dlam_a / la).min(axis=1)
        a_p = np.where(m_p >= 0.0, 1.0, np.minimum(1.0, -1.0 / np.minimum(m_p, -1e-300)))
        a_d = np.where(m_d >= 0.0, 1.0, np.minimum(1.0, -1.0 / np.minimum(m_d, -1e-300)))
        mu = compa.mean(axis=1)
        mu_aff = np.einsum("bg,bg->b", la + a_d[:, None] * dlam_a,
                           sa + a_p[:, None] * ds_a) / n_g
        sigma = np.clip(np.where(mu > 0.0, mu_aff / np.maximum(mu, 1e-300), 0.0),
                        0.0, 1.0) ** 3
        target = sigma * mu
        rhs = np.where((target > tau)[:, None],
                       (target[:, None] - dlam_a * ds_a) / sa,
                       tau / sa)
        dz = np.einsum("bmn,bn->bm", Hinv, -c - np.einsum("bmg,bg->bm", Ata, rhs))
        ds = -np.einsum("bgm,bm->bg", Aa, dz)
        dlam = rhs - la - d * ds
        m_p = (ds / sa).min(axis=1)
        m_d = (dlam / la).min(axis=1)
        a_p = np.where(m_p >= 0.0, 1.0, np.minimum(1.0, -frac / np.minimum(m_p, -1e-300)))
        a_d = np.where(m_d >= 0.0, 1.0, np.minimum(1.0, -frac / np.minimum(m_d, -1e-300)))
        z_new = za + a_p[:, None] * dz
        lam_new = la + a_d[:, None] * dlam
        s_new = ba - np.einsum("bgm,bm->bg", Aa, z_new)
        ok = (s_new.min(axis=1) > 0.0) & (lam_new.min(axis=1) > 0.0)
        upd = ia[ok]
        z[upd] = z_new[ok]
        lam[upd] = lam_new[ok]
        s[upd] = s_new[ok]
    r_dual = c + np.einsum("bmg,bg->bm", At, lam)
    comp = lam * s
    res = np.maximum(np.abs(r_dual).max(axis=1), np.abs(comp - tau).max(axis=1))
    return z, lam, np.nan_to_num(res, nan=np.inf) <= tol


def batch_contact_bundle(pairs: list, pose_idx: Array, poses: Array,
                         settings: IpSettings, level: int,
                         warm_z: Array | None = None,
                         warm_lam: Array | None = None,
                         rescale_seed=0) -> BatchContactData:
    """Nominal info (and first-derivative data) for all items, vectorized.

    Falls back to the scalar solver + rescaling for any item the batched
    loop leaves unconverged. ``poses`` must carry unit quaternions.
    """
    n_pairs = len(pairs)
    n_items = pose_idx.shape[0]
    n_g = pairs[0].n_g
    n_top = pairs[0].n_top
    c = pairs[0].c
    A, b, p_ref = batch_assemble(pairs, pose_idx, poses)
    z, lam, ok = batch_ip_solve(A, b, c, p_ref, settings.tau,
                                warm_z=warm_z, warm_lam=warm_lam,
                                tol=settings.tol, max_iter=settings.max_iter)
    if not ok.all():
        for i in np.flatnonzero(~ok):
            pair = pairs[i % n_pairs]
            q_t = Pose(poses[pose_idx[i], :3], poses[pose_idx[i], 3:])
            dlp = DistanceLp(A=A[i], b=b[i], c=c, n_g=n_g, n_top=n_top,
                             p_ref=p_ref[i])
            try:
                gamma = ip_solve(dlp, settings)
            except CollisionError:
                gamma = rescale_retry(pair, q_t, settings, (rescale_seed, int(i)))
            z[i] = gamma.z
            lam[i] = gamma.lam

    data = BatchContactData(n_items, n_g)
    data.z = z
    data.lam = lam
    data.n_top = n_top

    xis = poses[pose_idx, 3:]
    rhos = poses[pose_idx, :3]
    U = np.empty((n_items, n_top, 3, 4, 4))
    for p, pair in enumerate(pairs):
        U[p::n_pairs] = pair.U
    Uxi = np.einsum("blmrs,bs->blmr", U, xis)
    W = np.einsum("blmr,br->blm", Uxi, xis)
    P = z[:, :3] - rhos
    lam_top = lam[:, :n_top]
    D1 = np.empty((n_items, n_top, 7))
    D1[:, :, :3] = -W
    D1[:, :, 3:] = 2.0 * np.einsum("blmr,bm->blr", Uxi, P)
    data.w[:, 0] = 2.0 * z[:, 3]
    data.w[:, 1:] = np.einsum("blq,bl->bq", D1, lam_top)
    data.D1 = D1
    data.Uxi = Uxi
    if level < 1:
        return data

    DZ1 = np.zeros((n_items, n_top, 4, 7))
    DZ1[:, :, :3, 3:] = 2.0 * Uxi
    D2 = np.zeros((n_items, n_top, 7, 7))
    D2[:, :, :3, 3:] = -2.0 * Uxi
    D2[:, :, 3:, :3] = np.transpose(D2[:, :, :3, 3:], (0, 1, 3, 2))
    D2[:, :, 3:, 3:] = 2.0 * np.einsum("blmrs,bm->blrs", U, P)
    s_slack = b - np.einsum("bgm,bm->bg", A, z)
    dFq = np.zeros((n_items, 4 + n_g, 7))
    dFq_top = np.einsum("bl,blzq->bzq", lam_top, DZ1)
    dFq[:, :4] = dFq_top
    dFq[:, 4:4 + n_top] = -lam_top[:, :, None] * D1
    K = np.zeros((n_items, 4 + n_g, 4 + n_g))
    K[:, :4, 4:] = np.transpose(A, (0, 2, 1))
    K[:, 4:, :4] = -lam[:, :, None] * A
    K[:, 4:, 4:] = s_slack[:, None, :] * np.eye(n_g)[None, :, :]
    try:
        Dq_gamma = np.linalg.solve(K, -dFq)
    except np.linalg.LinAlgError as exc:
        raise CollisionNumericFailure(f"singular batched KKT: {exc}") from exc
    dgw = np.zeros((n_items, 8, 4 + n_g))
    dgw[:, 0, 3] = 2.0
    dgw[:, 1:, :4] = np.transpose(dFq_top, (0, 2, 1))
    dgw[:, 1:, 4:4 + n_top] = np.transpose(D1, (0, 2, 1))
    dqw = np.zeros((n_items, 8, 7))
    dqw[:, 1:] = np.einsum("bl,bluv->buv", lam_top, D2)
    data.Dq_w = dgw @ Dq_gamma + dqw
    data.K = K
    data.Dq_gamma = Dq_gamma
    data.dgw = dgw
    data.DZ1 = DZ1
    data.D2 = D2
    data.U = U
    data.A = A
    return data


def batch_hessian_seeds(data: BatchContactData, seeds: Array) -> Array:
    """Directional Hessians <seed_i, D^2_q w_i> for every item, (B, 7, 7)."""
    lam_top = data.lam[:, :data.n_top]
    U, D1, D2, DZ1 = data.U, data.D1, data.D2, data.DZ1
    Dq_gamma = data.Dq_gamma
    n_g = data.lam.shape[1]
    n_top = data.n_top
    Dz = Dq_gamma[:, :4]
    Dlam = Dq_gamma[:, 4:]
    s_n = seeds[:, 1:]

    s_gamma = np.einsum("bwg,bw->bg", data.dgw, seeds)
    r = np.linalg.solve(np.transpose(data.K, (0, 2, 1)), -s_gamma[:, :, None])[:, :, 0]
    r_z, r_lam = r[:, :4], r[:, 4:]

    T_lamU = np.einsum("bl,blmrs->bmrs", lam_top, U)
    H = np.zeros((seeds.shape[0], 7, 7))
    M_rho_xi = -2.0 * np.einsum("bmrs,br->bms", T_lamU, s_n[:, 3:])
    H[:, :3, 3:] += M_rho_xi
    H[:, 3:, :3] += np.transpose(M_rho_xi, (0, 2, 1))
    H[:, 3:, 3:] += -2.0 * np.einsum("bm,bmrs->brs", s_n[:, :3], T_lamU)

    Hqg = np.zeros((seeds.shape[0], 7, 4 + n_g))
    Hqg[:, 3:, :3] = np.transpose(2.0 * np.einsum("bmrs,bs->bmr", T_lamU, s_n[:, 3:]),
                                  (0, 2, 1))
    Hqg[:, :, 4:4 + n_top] = np.transpose(
        np.einsum("bluv,bv->blu", D2, s_n), (0, 2, 1))
    T = Hqg @ Dq_gamma
    H += T + np.transpose(T, (0, 2, 1))

    B = np.zeros((seeds.shape[0], 4, n_g))
    B[:, :, :n_top] = np.transpose(np.einsum("blzq,bq->blz", DZ1, s_n), (0, 2, 1))
    T4 = np.transpose(Dz, (0, 2, 1)) @ B @ Dlam
    H += T4 + np.transpose(T4, (0, 2, 1))

    omega = r_lam[:, :n_top] * lam_top
    HFqq = np.zeros((seeds.shape[0], 7, 7))
    HFqq[:, 3:, 3:] += 2.0 * np.einsum("br,brus->bus", r_z[:, :3], T_lamU)
    HFqq -= np.einsum("bl,bluv->buv", omega, D2)
    HFgq = np.zeros((seeds.shape[0], 4 + n_g, 7))
    HFgq[:, :4] = -np.einsum("bl,blzq->bzq", omega, DZ1)
    HFgq[:, 4:4 + n_top] = (np.einsum("bz,blzq->blq", r_z, DZ1)
                            - r_lam[:, :n_top, None] * D1)
    B2 = -(np.transpose(data.A, (0, 2, 1)) * r_lam[:, None, :])
    T5 = np.transpose(HFgq, (0, 2, 1)) @ Dq_gamma
    T6 = np.transpose(Dz, (0, 2, 1)) @ B2 @ Dlam
    H += HFqq + T5 + np.transpose(T5, (0, 2, 1)) + T6 + np.transpose(T6, (0, 2, 1))
    return H
