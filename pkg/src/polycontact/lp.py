"""Fixed-barrier interior-point solver for small dense inequality-form LPs.

Solves ``min c^T z  s.t.  A z <= b`` up to a fixed barrier parameter
``tau > 0``: the returned primal-dual pair satisfies the perturbed KKT
system ``c + A^T lam = 0``, ``lam_l * (b - A z)_l = tau`` with strictly
interior ``lam > 0`` and ``b - A z > 0``.

The iteration is a Mehrotra-style predictor-corrector on the tau-shifted
central path, condensed to normal equations (the problems here have only a
handful of primal variables). The centering target is floored at ``tau``;
once the floor is reached the second-order correction is dropped so the
final phase is plain Newton on the perturbed KKT residual, which converges
quadratically to the tau-center. The loop is written to minimize per-call
overhead since it sits inside the trajectory optimizer's innermost loop.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


class LpError(RuntimeError):
    """Base class for LP solver failures."""


class LpNumericFailure(LpError):
    """NaN/Inf in iterates or a singular normal matrix."""


class LpDiverged(LpError):
    """Primal iterates exceeded the divergence bound (unbounded problem)."""


class LpIterationLimit(LpError):
    """The iteration budget was exhausted before reaching tolerance."""


@dataclass
class LpSolution:
    z: Array
    lam: Array
    iterations: int
    converged: bool
    residual: float


def kkt_residual(A: Array, b: Array, c: Array, z: Array, lam: Array, tau: float) -> float:
    """Infinity norm of the perturbed KKT residual F_tau."""
    r_dual = c + A.T @ lam
    comp = lam * (b - A @ z) - tau
    return max(float(np.abs(r_dual).max()), float(np.abs(comp).max()))


def solve_inequality_lp(A: Array, b: Array, c: Array, *, tau: float,
                        z0: Array, lam0: Array | None = None,
                        tol: float = 1e-10, max_iter: int = 50,
                        frac_to_boundary: float = 0.995,
                        mu_start: float = 1.0,
                        divergence_bound: float | None = None,
                        allow_pinv: bool = True) -> LpSolution:
    """Solve the LP to the fixed barrier parameter ``tau``.

    ``z0`` must be strictly interior (``b - A z0 > 0``). If ``lam0`` is given
    and strictly positive it is used as a warm start, otherwise duals start
    on the central path at ``max(mu_start, tau)``.

    Raises :class:`LpIterationLimit`, :class:`LpNumericFailure`, or
    :class:`LpDiverged`; callers in the collision pipeline translate these
    into the rescaling retry heuristic.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    z = np.asarray(z0, dtype=float).copy()
    s = b - A @ z
    if s.min() <= 0.0:
        raise ValueError("z0 is not strictly interior")
    if lam0 is not None and lam0.min() > 0.0:
        lam = np.asarray(lam0, dtype=float).copy()
    else:
        lam = max(mu_start, tau) / s
    n_g = b.shape[0]
    frac = frac_to_boundary
    At = np.ascontiguousarray(A.T)
    neg_c = -c
    inv = np.linalg.inv

    for it in range(max_iter):
        r_dual = c + At @ lam
        comp = lam * s
        res = max(float(np.abs(r_dual).max()), float(np.abs(comp - tau).max()))
        if res <= tol:
            return LpSolution(z, lam, it, True, res)
        if not np.isfinite(res):
            raise LpNumericFailure("non-finite KKT residual")

        d = lam / s
        H = At @ (A * d[:, None])
        try:
            Hinv = inv(H)
        except np.linalg.LinAlgError as exc:
            if not allow_pinv:
                # with strictly positive weights the normal matrix is singular
                # iff the constraint normals do not span: callers certifying
                # boundedness treat this as an unbounded certificate
                raise LpNumericFailure(f"singular normal matrix: {exc}") from exc
            # near-degenerate conditioning: fall back to a minimum-norm step
            Hinv = np.linalg.pinv(H, rcond=1e-14)
        if not np.all(np.isfinite(Hinv)):
            raise LpNumericFailure("singular normal matrix")

        # Predictor toward complementarity zero; with exact slacks the
        # eliminated right-hand side collapses to -c.
        dz_a = Hinv @ neg_c
        ds_a = A @ dz_a
        ds_a = -ds_a
        dlam_a = -(lam + d * ds_a)
        m_p = float((ds_a / s).min())
        m_d = float((dlam_a / lam).min())
        a_p = 1.0 if m_p >= 0.0 else min(1.0, -1.0 / m_p)
        a_d = 1.0 if m_d >= 0.0 else min(1.0, -1.0 / m_d)
        mu = float(comp.sum()) / n_g
        mu_aff = float((lam + a_d * dlam_a) @ (s + a_p * ds_a)) / n_g
        sigma = min(1.0, max(0.0, mu_aff / mu) ** 3) if mu > 0.0 else 0.0
        target = sigma * mu

        if target > tau:
            # Corrector with Mehrotra second-order term while above the floor.
            rhs = (target - dlam_a * ds_a) / s
        else:
            # At the floor: plain Newton on F_tau for clean quadratic polish.
            rhs = tau / s
        dz = Hinv @ (neg_c - At @ rhs)
        ds = A @ dz
        ds = -ds
        dlam = rhs - lam - d * ds
        m_p = float((ds / s).min())
        m_d = float((dlam / lam).min())
        a_p = 1.0 if m_p >= 0.0 else min(1.0, -frac / m_p)
        a_d = 1.0 if m_d >= 0.0 else min(1.0, -frac / m_d)
        z += a_p * dz
        lam += a_d * dlam
        if divergence_bound is not None and float(np.abs(z).max()) > divergence_bound:
            raise LpDiverged(f"primal iterate exceeded bound {divergence_bound:g}")
        s = b - A @ z
        if s.min() <= 0.0 or lam.min() <= 0.0:
            raise LpNumericFailure("iterate left the strict interior")

    res = kkt_residual(A, b, c, z, lam, tau)
    if res <= tol:
        return LpSolution(z, lam, max_iter, True, res)
    raise LpIterationLimit(f"no convergence in {max_iter} iterations (residual {res:.3e})")
