"""Cartesian impedance law with geometrically consistent rotational stiffness.

The wrench pulls a compliant body toward a reference state through isotropic
translational/rotational springs plus damping:

    J = ( K_t (rho_r - rho_c) + D_t (nu_r - nu_c),
          2 eta_cr K_r eps_cr + D_r (omega_r - omega_c) )

where (eta_cr, eps_cr) is the quaternion mismatch xi_c^{-1} (x) xi_r. For
isotropic K_r the full geometric stiffness term 2 (eta I + [eps]x) K_r eps
collapses to 2 eta K_r eps since [eps]x eps = 0.

Analytic first and second derivatives with respect to both full 13-vector
states are provided for the trajectory optimizer's exact Hessian; quaternion
inputs are normalized internally, and all derivatives are taken with respect
to the raw (unnormalized) coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import (BodySpec, hamilton_tensor, normalize_hessian_weighted,
                       normalize_jacobian)

Array = np.ndarray


@dataclass
class ImpedanceGains:
    """Isotropic stiffnesses and (derived) damping matrices."""

    k_t: float
    k_r: float
    D_t: Array
    D_r: Array

    def __post_init__(self) -> None:
        if self.k_t <= 0.0 or self.k_r <= 0.0:
            raise ValueError("stiffnesses must be positive")
        self.D_t = np.asarray(self.D_t, dtype=float).reshape(3, 3)
        self.D_r = np.asarray(self.D_r, dtype=float).reshape(3, 3)


def critical_damping(k_t: float, k_r: float, body: BodySpec) -> tuple[Array, Array]:
    """Per-axis critical damping: D = 2 sqrt(stiffness * inertia) I.

    The rotational term uses the mean of the body inertia diagonal.
    """
    d_t = 2.0 * np.sqrt(k_t * body.mass)
    d_r = 2.0 * np.sqrt(k_r * float(np.mean(body.inertia)))
    return d_t * np.eye(3), d_r * np.eye(3)


def make_gains(k_t: float, k_r: float, body: BodySpec,
               D_t: Array | None = None, D_r: Array | None = None) -> ImpedanceGains:
    """Gains with critical damping unless explicit damping matrices are given."""
    dt_c, dr_c = critical_damping(k_t, k_r, body)
    return ImpedanceGains(k_t=k_t, k_r=k_r,
                          D_t=dt_c if D_t is None else D_t,
                          D_r=dr_c if D_r is None else D_r)


@lru_cache(maxsize=1)
def _mismatch_tensor() -> Array:
    # C[i, a, b] with (conj(u_c) (x) u_r)_i = u_c^T C_i u_r
    M = hamilton_tensor()
    C = M.copy()
    C[:, 1:, :] *= -1.0
    C.setflags(write=False)
    return C


def quaternion_mismatch(xi_c: Array, xi_r: Array) -> Array:
    """(eta, eps) = normalize(xi_c)^{-1} (x) normalize(xi_r)."""
    u_c = xi_c / np.linalg.norm(xi_c)
    u_r = xi_r / np.linalg.norm(xi_r)
    C = _mismatch_tensor()
    return np.einsum("iab,a,b->i", C, u_c, u_r)


def impedance_wrench(x_r: Array, x_c: Array, gains: ImpedanceGains) -> Array:
    """Wrench (force world-frame, torque body-frame) on the compliant body."""
    x_r = np.asarray(x_r, dtype=float).reshape(13)
    x_c = np.asarray(x_c, dtype=float).reshape(13)
    y = quaternion_mismatch(x_c[3:7], x_r[3:7])
    force = gains.k_t * (x_r[:3] - x_c[:3]) + gains.D_t @ (x_r[7:10] - x_c[7:10])
    torque = 2.0 * gains.k_r * y[0] * y[1:] + gains.D_r @ (x_r[10:] - x_c[10:])
    return np.concatenate([force, torque])


def _mismatch_grads(u_c: Array, u_r: Array):
    """y, dy/du_c (4x4 rows i), dy/du_r for y_i = u_c^T C_i u_r."""
    C = _mismatch_tensor()
    y = np.einsum("iab,a,b->i", C, u_c, u_r)
    dy_dc = np.einsum("iab,b->ia", C, u_r)   # (4, 4): row i is C_i u_r
    dy_dr = np.einsum("iab,a->ib", C, u_c)   # (4, 4): row i is C_i^T u_c
    return y, dy_dc, dy_dr


def wrench_jacobians(x_r: Array, x_c: Array, gains: ImpedanceGains) -> tuple[Array, Array]:
    """(dJ/dx_r, dJ/dx_c), each 6x13, with respect to raw state coordinates."""
    x_r = np.asarray(x_r, dtype=float).reshape(13)
    x_c = np.asarray(x_c, dtype=float).reshape(13)
    xi_r, xi_c = x_r[3:7], x_c[3:7]
    Nr = normalize_jacobian(xi_r)
    Nc = normalize_jacobian(xi_c)
    u_r = xi_r / np.linalg.norm(xi_r)
    u_c = xi_c / np.linalg.norm(xi_c)
    y, dy_dc, dy_dr = _mismatch_grads(u_c, u_r)

    Jr = np.zeros((6, 13))
    Jc = np.zeros((6, 13))
    Jr[:3, :3] = gains.k_t * np.eye(3)
    Jc[:3, :3] = -gains.k_t * np.eye(3)
    Jr[:3, 7:10] = gains.D_t
    Jc[:3, 7:10] = -gains.D_t
    Jr[3:, 10:] = gains.D_r
    Jc[3:, 10:] = -gains.D_r
    # torque spring t_j = 2 k_r y_0 y_j
    for j in range(3):
        gu_r = 2.0 * gains.k_r * (y[1 + j] * dy_dr[0] + y[0] * dy_dr[1 + j])
        gu_c = 2.0 * gains.k_r * (y[1 + j] * dy_dc[0] + y[0] * dy_dc[1 + j])
        Jr[3 + j, 3:7] = gu_r @ Nr
        Jc[3 + j, 3:7] = gu_c @ Nc
    return Jr, Jc


def wrench_hessian(x_r: Array, x_c: Array, gains: ImpedanceGains,
                   seed: Array) -> Array:
    """<seed, D^2 J> over the stacked coordinates (x_r, x_c), shape 26x26.

    Only the rotational spring term is nonlinear; its quaternion bilinear
    structure plus the normalization curvature give the exact Hessian.
    """
    x_r = np.asarray(x_r, dtype=float).reshape(13)
    x_c = np.asarray(x_c, dtype=float).reshape(13)
    seed = np.asarray(seed, dtype=float).reshape(6)
    xi_r, xi_c = x_r[3:7], x_c[3:7]
    Nr = normalize_jacobian(xi_r)
    Nc = normalize_jacobian(xi_c)
    u_r = xi_r / np.linalg.norm(xi_r)
    u_c = xi_c / np.linalg.norm(xi_c)
    y, dy_dc, dy_dr = _mismatch_grads(u_c, u_r)
    C = _mismatch_tensor()
    mu = seed[3:]

    # phi = 2 k_r y_0 (mu . y_vec) in u = (u_c, u_r) coordinates
    g0_c, g0_r = dy_dc[0], dy_dr[0]
    gm_c = mu @ dy_dc[1:]
    gm_r = mu @ dy_dr[1:]
    muy = float(mu @ y[1:])
    k2 = 2.0 * gains.k_r
    # u-space gradient, needed for the normalization curvature terms
    phi_c = k2 * (muy * g0_c + y[0] * gm_c)
    phi_r = k2 * (muy * g0_r + y[0] * gm_r)
    # u-space Hessian blocks: H_cc, H_cr, H_rr
    Hcc = k2 * (np.outer(g0_c, gm_c) + np.outer(gm_c, g0_c))
    Hrr = k2 * (np.outer(g0_r, gm_r) + np.outer(gm_r, g0_r))
    Ccross = muy * C[0] + y[0] * np.einsum("j,jab->ab", mu, C[1:])
    Hcr = k2 * (np.outer(g0_c, gm_r) + np.outer(gm_c, g0_r) + Ccross)

    H = np.zeros((26, 26))
    # chain through normalization: quaternion slots are 3:7 (x_r) and 16:20 (x_c)
    r_sl = slice(3, 7)
    c_sl = slice(16, 20)
    H[r_sl, r_sl] = Nr.T @ Hrr @ Nr + normalize_hessian_weighted(xi_r, phi_r)
    H[c_sl, c_sl] = Nc.T @ Hcc @ Nc + normalize_hessian_weighted(xi_c, phi_c)
    cross = Nc.T @ Hcr @ Nr
    H[c_sl, r_sl] = cross
    H[r_sl, c_sl] = cross.T
    return H
