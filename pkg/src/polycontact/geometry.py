"""Rigid-body geometry core: quaternions, poses, polytopes, perturbation operators.

Conventions used across the package:
  - Quaternions are scalar-first ``(w, x, y, z)`` and compose with the
    Hamilton product.
  - A pose ``q = (rho, xi)`` is a world-frame position (meters) plus a unit
    quaternion orientation; rotation matrices map body vectors to world.
  - Polytopes are bounded halfspace sets ``{p : G p <= h}`` with unit-norm
    rows of ``G`` and strictly positive ``h`` (origin interior), placed in a
    parent frame by an offset pose.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

Array = np.ndarray


class GeometryError(ValueError):
    """Base class for geometry validation failures."""


class InvalidQuaternionError(GeometryError):
    """Quaternion norm deviates too far from unity."""


class DegeneratePoseError(GeometryError):
    """Pose quaternion has near-zero norm and cannot be normalized."""


class PolytopeError(GeometryError):
    """Base class for polytope validation failures."""


class OriginNotInteriorError(PolytopeError):
    """Some offset ``h_l <= 0``: the local origin is not strictly inside."""


class UnboundedPolytopeError(PolytopeError):
    """The halfspace intersection is unbounded along some axis."""


class DegenerateFaceError(PolytopeError):
    """A row of ``G`` is (numerically) zero."""


def quat_multiply(a: Array, b: Array) -> Array:
    """Hamilton product ``a (x) b``, scalar-first. Inputs need not be unit."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: Array) -> Array:
    """Conjugate quaternion; equals the inverse for unit quaternions."""
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: Array) -> Array:
    """Scale to unit norm. Raises for near-zero input."""
    n = float(np.linalg.norm(q))
    if n <= 1e-8:
        raise DegeneratePoseError(f"quaternion norm {n:.3e} too small to normalize")
    return np.asarray(q, dtype=float) / n


def rotation_matrix(xi: Array) -> Array:
    """Rotation matrix of a unit quaternion (body -> world).

    The input must be unit within 1e-6. Uses the homogeneous quadratic form,
    which agrees with the standard formula at unit norm.
    """
    n = float(np.linalg.norm(xi))
    if abs(n - 1.0) > 1e-6:
        raise InvalidQuaternionError(f"quaternion norm {n:.9f} not within 1e-6 of 1")
    return rotation_matrix_free(xi)


def rotation_matrix_free(xi: Array) -> Array:
    """Homogeneous quadratic rotation form R(xi) = (w^2 - v.v) I + 2 v v^T + 2 w [v]x.

    No unit check; each entry is a quadratic form in the four quaternion
    components, so derivatives with respect to the free components are linear
    (see :func:`rotation_quadratic_tensor`).
    """
    w, x, y, z = xi
    ww, xx, yy, zz = w * w, x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array([
        [ww + xx - yy - zz, 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), ww - xx + yy - zz, 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), ww - xx - yy + zz],
    ])


@lru_cache(maxsize=1)
def _rotation_quadratic_tensor_cached() -> Array:
    S = np.zeros((3, 3, 4, 4))
    eye4 = np.diag([1.0, -1.0, -1.0, -1.0])
    for m in range(3):
        S[m, m] += eye4
        for n in range(3):
            # 2 v_m v_n term
            S[m, n, 1 + m, 1 + n] += 1.0
            S[m, n, 1 + n, 1 + m] += 1.0
    # 2 w [v]x term: ([v]x)_{mn} = -eps_{mnk} v_k
    eps = np.zeros((3, 3, 3))
    eps[0, 1, 2] = eps[1, 2, 0] = eps[2, 0, 1] = 1.0
    eps[0, 2, 1] = eps[2, 1, 0] = eps[1, 0, 2] = -1.0
    for m in range(3):
        for n in range(3):
            for k in range(3):
                if eps[m, n, k] != 0.0:
                    S[m, n, 0, 1 + k] += -eps[m, n, k]
                    S[m, n, 1 + k, 0] += -eps[m, n, k]
    S.setflags(write=False)
    return S


def rotation_quadratic_tensor() -> Array:
    """Constant tensor S with R(xi)[m, n] = xi^T S[m, n] xi (symmetric in xi)."""
    return _rotation_quadratic_tensor_cached()


@lru_cache(maxsize=1)
def _hamilton_tensor_cached() -> Array:
    M = np.zeros((4, 4, 4))
    basis = np.eye(4)
    for a in range(4):
        for b in range(4):
            M[:, a, b] = quat_multiply(basis[a], basis[b])
    M.setflags(write=False)
    return M


def hamilton_tensor() -> Array:
    """Constant tensor M with (a (x) b)_i = sum_{jk} M[i, j, k] a_j b_k."""
    return _hamilton_tensor_cached()


def quat_left_matrix(q: Array) -> Array:
    """Matrix L(q) with q (x) r = L(q) r."""
    return np.einsum("ijk,j->ik", hamilton_tensor(), q)


def quat_right_matrix(r: Array) -> Array:
    """Matrix Rm(r) with q (x) r = Rm(r) q."""
    return np.einsum("ijk,k->ij", hamilton_tensor(), r)


def normalize_jacobian(xi: Array) -> Array:
    """Jacobian of the normalization map u(xi) = xi / ||xi||."""
    r = float(np.linalg.norm(xi))
    u = xi / r
    return (np.eye(4) - np.outer(u, u)) / r


def normalize_hessian_weighted(xi: Array, w: Array) -> Array:
    """Weighted second derivative sum_a w_a d2 u_a / dxi dxi of u = xi/||xi||."""
    r = float(np.linalg.norm(xi))
    u = xi / r
    wu = float(w @ u)
    return (3.0 * wu * np.outer(u, u) - np.outer(u, w) - np.outer(w, u)
            - wu * np.eye(4)) / (r * r)


def quat_rate_matrix(xi: Array) -> Array:
    """Omega(xi) in R^{4x3} with xi (x) (0, omega) = Omega(xi) omega.

    The quaternion rate under body angular velocity omega is
    ``0.5 * Omega(xi) @ omega``; columns are orthonormal for unit xi.
    """
    w, x, y, z = xi
    return np.array([
        [-x, -y, -z],
        [w, -z, y],
        [z, w, -x],
        [-y, x, w],
    ])


@dataclass
class Pose:
    """Position + quaternion container.

    Constructed poses are expected to carry unit quaternions (within 1e-9);
    intermediate optimizer iterates are exempt and should pass through
    :func:`normalize_pose` before geometric use.
    """

    rho: Array
    xi: Array

    def __post_init__(self) -> None:
        self.rho = np.asarray(self.rho, dtype=float).reshape(3)
        self.xi = np.asarray(self.xi, dtype=float).reshape(4)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def as_vector(self) -> Array:
        return np.concatenate([self.rho, self.xi])

    @classmethod
    def from_vector(cls, q: Array) -> "Pose":
        q = np.asarray(q, dtype=float).reshape(7)
        return cls(q[:3], q[3:])


@dataclass
class RigidState:
    """Rigid body state x = (q, v) with v = (nu, omega) in body-consistent frames."""

    q: Pose
    v: Array

    def __post_init__(self) -> None:
        self.v = np.asarray(self.v, dtype=float).reshape(6)

    def as_vector(self) -> Array:
        return np.concatenate([self.q.as_vector(), self.v])

    @classmethod
    def from_vector(cls, x: Array) -> "RigidState":
        x = np.asarray(x, dtype=float).reshape(13)
        return cls(Pose.from_vector(x[:7]), x[7:])

    @classmethod
    def rest(cls, pose: Pose) -> "RigidState":
        return cls(pose, np.zeros(6))


def normalize_pose(q: Pose) -> Pose:
    """Pose with the quaternion scaled to unit norm: (rho, xi / ||xi||)."""
    return Pose(q.rho.copy(), quat_normalize(q.xi))


def pose_perturb(q: Pose, q_hat: Pose) -> Pose:
    """P_q(q, q_hat) = (rho + R(xi) rho_hat, xi (x) xi_hat). Unit quaternions assumed."""
    return Pose(q.rho + rotation_matrix_free(q.xi) @ q_hat.rho,
                quat_multiply(q.xi, q_hat.xi))


def pose_perturb_inverse(q: Pose, q_hat: Pose) -> Pose:
    """Inverse operator: pose_perturb(pose_perturb_inverse(q, q_hat), q_hat) == q."""
    xi = quat_multiply(q.xi, quat_conjugate(q_hat.xi))
    return Pose(q.rho - rotation_matrix_free(xi) @ q_hat.rho, xi)


def state_perturb(x: RigidState, q_hat: Pose) -> RigidState:
    """State-level lift P_x: perturbs the pose, passes the velocity through."""
    return RigidState(pose_perturb(x.q, q_hat), x.v.copy())


def state_perturb_inverse(x: RigidState, q_hat: Pose) -> RigidState:
    return RigidState(pose_perturb_inverse(x.q, q_hat), x.v.copy())


def world_subshape_pose(q: Pose, offset: Pose) -> Pose:
    """World placement of a sub-polytope with the given offset in the body frame."""
    return Pose(q.rho + rotation_matrix_free(q.xi) @ offset.rho,
                quat_multiply(q.xi, offset.xi))


@dataclass
class Polytope:
    """Bounded convex halfspace set {p : G p <= h} with a placement offset.

    ``validated`` is set by :func:`validate_polytope`; validated instances have
    unit-norm rows, h > 0, certified boundedness, and read-only arrays.
    """

    G: Array
    h: Array
    offset_pose: Pose = field(default_factory=Pose.identity)
    validated: bool = False

    def __post_init__(self) -> None:
        self.G = np.asarray(self.G, dtype=float).reshape(-1, 3)
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        if self.G.shape[0] != self.h.shape[0]:
            raise PolytopeError(
                f"G has {self.G.shape[0]} rows but h has {self.h.shape[0]} entries")

    @property
    def n_faces(self) -> int:
        return self.G.shape[0]


def _certify_bounded(G: Array, h: Array) -> None:
    """Solve 6 axis-extent LPs max +-p_k subject to G p <= h; divergence => unbounded."""
    from . import lp

    scale = 1.0 + float(np.max(np.abs(h)))
    for k in range(3):
        for sign in (1.0, -1.0):
            c = np.zeros(3)
            c[k] = -sign  # maximize sign * p_k
            try:
                res = lp.solve_inequality_lp(
                    np.ascontiguousarray(G), h.copy(), c,
                    tau=1e-8, z0=np.zeros(3), tol=1e-8, max_iter=200,
                    divergence_bound=1e7 * scale, allow_pinv=False)
            except lp.LpDiverged:
                raise UnboundedPolytopeError(
                    f"polytope unbounded along {'+-'[sign < 0]}{'xyz'[k]} axis") from None
            except lp.LpNumericFailure:
                # a bounded polytope has rank-3 G, making the extent LP's
                # normal matrix definite at interior points; singularity
                # certifies an unbounded recession direction
                raise UnboundedPolytopeError(
                    f"polytope unbounded (rank-deficient face normals, "
                    f"detected along {'+-'[sign < 0]}{'xyz'[k]} axis)") from None
            if not res.converged:
                raise PolytopeError(
                    f"boundedness LP did not converge along {'xyz'[k]} axis")


def validate_polytope(poly: Polytope) -> Polytope:
    """Validated copy: rows renormalized, h > 0 checked, boundedness certified.

    Rows with non-unit norm are rescaled together with the matching h entry,
    so the halfspace set is unchanged. Idempotent: already-unit rows are left
    untouched bit-for-bit.
    """
    G = poly.G.copy()
    h = poly.h.copy()
    norms = np.linalg.norm(G, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise DegenerateFaceError(f"row {bad} of G is numerically zero")
    fix = np.abs(norms - 1.0) > 1e-12
    if np.any(fix):
        G[fix] /= norms[fix, None]
        h[fix] /= norms[fix]
    if np.any(h <= 0.0):
        bad = int(np.argmin(h))
        raise OriginNotInteriorError(
            f"h[{bad}] = {h[bad]:.6g} <= 0 after row normalization; the local origin "
            "must lie strictly inside the polytope (re-center the input data)")
    _certify_bounded(G, h)
    G.setflags(write=False)
    h.setflags(write=False)
    return Polytope(G=G, h=h, offset_pose=Pose(poly.offset_pose.rho.copy(),
                                               poly.offset_pose.xi.copy()),
                    validated=True)


def box_polytope(half_extents, offset_pose: Pose | None = None) -> Polytope:
    """Axis-aligned box with the given half extents, centered at the local origin."""
    hx, hy, hz = np.asarray(half_extents, dtype=float)
    G = np.vstack([np.eye(3), -np.eye(3)])
    h = np.array([hx, hy, hz, hx, hy, hz])
    return validate_polytope(Polytope(G, h, offset_pose or Pose.identity()))


@dataclass
class BodySpec:
    """Actuated rigid body, environment shapes, and the contact pairs to monitor.

    The actuated polytope offsets are expressed so that the pose position is
    the center of mass; the inertia diagonal is body-frame about the CoM.
    """

    mass: float
    inertia: Array
    actuated: list
    environment: list
    pairs: list

    def __post_init__(self) -> None:
        self.inertia = np.asarray(self.inertia, dtype=float).reshape(3)
        if self.mass <= 0.0:
            raise GeometryError(f"mass must be positive, got {self.mass}")
        if np.any(self.inertia <= 0.0):
            raise GeometryError("inertia diagonal must be positive componentwise")
        if not self.pairs:
            raise GeometryError("at least one contact pair is required")
        for (i, j) in self.pairs:
            if not (0 <= i < len(self.actuated) and 0 <= j < len(self.environment)):
                raise GeometryError(f"contact pair ({i}, {j}) out of range")

    @property
    def mass_matrix(self) -> Array:
        return np.diag(np.concatenate([np.full(3, self.mass), self.inertia]))

    @property
    def mass_matrix_inverse(self) -> Array:
        return np.diag(np.concatenate([np.full(3, 1.0 / self.mass), 1.0 / self.inertia]))

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)
