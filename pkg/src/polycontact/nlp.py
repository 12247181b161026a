"""Primal-dual interior-point solver for sparse nonlinear programs.

Reference implementation for problems of the form

    min f(x)  s.t.  c_E(x) = 0,  c_I(x) <= 0,

handled by slacking the inequalities, a log barrier with a monotone
(Fiacco-McCormick style) reduction of the barrier parameter from
``mu_init``, and Newton steps on the barrier KKT system with a selectable
Lagrangian Hessian: exact, Gauss-Newton (cost curvature only), or damped
limited-memory BFGS. Steps are safeguarded by a fraction-to-boundary rule
and a backtracking line search on an l1 merit function; the linear systems
are condensed to the bordered (x, y) form, factorized sparsely, and
regularized by trial when the factorization or curvature is unusable.

A problem object must provide::

    n                     number of variables
    cost(x) -> float
    cost_grad(x) -> (n,)
    eq(x) -> (m_e,)            equality residuals, target 0
    ineq(x) -> (m_i,)          inequality residuals, target <= 0
    eq_jac(x) -> sparse (m_e, n)
    ineq_jac(x) -> sparse (m_i, n)
    lag_hess(x, y, z) -> sparse (n, n)    exact Lagrangian Hessian
    cost_gn_hess(x) -> sparse (n, n)      Gauss-Newton (cost curvature only)

Problem objects are expected to cache per-x work internally (they are
called several times per iterate, including at line-search trial points).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

try:
    from cvxopt import cholmod as _cholmod
    from cvxopt import spmatrix as _cvx_spmatrix
    _cholmod.options["supernodal"] = 0
    _HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover - cvxopt is a hard dependency in practice
    _HAVE_CHOLMOD = False

Array = np.ndarray


def _inertia_negatives(K_csc) -> int | None:
    """Number of negative pivots of the symmetric matrix via LDL^T.

    Returns None when the factorization breaks down (zero pivot), which the
    caller treats as wrong inertia. The factor is used only for counting; the
    actual solves go through the sparse LU path.
    """
    if not _HAVE_CHOLMOD:
        return None
    Kl = sp.tril(K_csc).tocoo()
    cvK = _cvx_spmatrix(Kl.data, Kl.row.astype(int), Kl.col.astype(int),
                        K_csc.shape)
    try:
        F = _cholmod.symbolic(cvK)
        _cholmod.numeric(cvK, F)
        L = _cholmod.getfactor(F)
    except ArithmeticError:
        return None
    d = np.array(L.V).ravel()[np.array(L.I).ravel() == np.array(L.J).ravel()]
    # diagonal entries of the factor are the D pivots in simplicial LDL mode
    if np.any(d == 0.0) or not np.all(np.isfinite(d)):
        return None
    return int((d < 0.0).sum())

_REG_LADDER = (0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e4)


@dataclass
class NlpStats:
    iterations: int = 0
    converged: bool = False
    kkt_residual: float = np.inf
    cost: float = np.inf
    wall_time: float = 0.0
    status: str = "running"
    mu_final: float = 0.0


@dataclass
class NlpSolution:
    x: Array
    y: Array            # equality multipliers
    z: Array            # inequality multipliers (>= 0)
    s: Array            # slacks (> 0)
    stats: NlpStats = field(default_factory=NlpStats)


def _max_step(x: Array, dx: Array, frac: float) -> float:
    if x.size == 0:
        return 1.0
    m = float((dx / x).min())
    return 1.0 if m >= 0.0 else min(1.0, -frac / m)


class _LbfgsMemory:
    """Damped limited-memory BFGS model B = sigma I - U Minv U^T."""

    def __init__(self, n: int, memory: int = 20):
        self.n = n
        self.memory = memory
        self.S: list[Array] = []
        self.Y: list[Array] = []
        self.sigma = 1.0

    def update(self, s: Array, y: Array) -> None:
        ss = float(s @ s)
        if ss <= 1e-16:
            return
        sy = float(s @ y)
        Bs = self.multiply(s)
        sBs = float(s @ Bs)
        if sBs > 0.0 and sy < 0.2 * sBs:
            theta = 0.8 * sBs / (sBs - sy)
            y = theta * y + (1.0 - theta) * Bs
            sy = float(s @ y)
        if sy <= 1e-12 * ss:
            return
        self.S.append(s.copy())
        self.Y.append(np.asarray(y, dtype=float).copy())
        if len(self.S) > self.memory:
            self.S.pop(0)
            self.Y.pop(0)
        self.sigma = float(y @ y) / sy

    def low_rank(self):
        """(U, M) with B = sigma I - U M^{-1} U^T, or None when empty."""
        if not self.S:
            return None
        S = np.column_stack(self.S)
        Y = np.column_stack(self.Y)
        StY = S.T @ Y
        L = np.tril(StY, -1)
        D = np.diag(np.diag(StY))
        M = np.block([[self.sigma * (S.T @ S), L], [L.T, -D]])
        U = np.hstack([self.sigma * S, Y])
        return U, M

    def multiply(self, v: Array) -> Array:
        out = self.sigma * v
        lr = self.low_rank()
        if lr is not None:
            U, M = lr
            try:
                out = out - U @ np.linalg.solve(M, U.T @ v)
            except np.linalg.LinAlgError:
                pass
        return out


class _ScaledProblem:
    """Gradient-based scaling wrapper: f and constraint rows are scaled so
    their gradients at the start point have infinity norm at most 100."""

    def __init__(self, problem, x0: Array, g_max: float = 100.0):
        self.inner = problem
        self.n = problem.n
        g = problem.cost_grad(x0)
        self.s_f = min(1.0, g_max / max(float(np.abs(g).max()), 1e-8))
        J_e = problem.eq_jac(x0)
        J_i = problem.ineq_jac(x0)

        def row_scales(J):
            if J.shape[0] == 0:
                return np.ones(0)
            mags = np.abs(J).max(axis=1).toarray().ravel()
            return np.minimum(1.0, g_max / np.maximum(mags, 1e-8))

        self.s_e = row_scales(J_e)
        self.s_i = row_scales(J_i)

    def cost(self, x):
        return self.s_f * self.inner.cost(x)

    def cost_grad(self, x):
        return self.s_f * self.inner.cost_grad(x)

    def eq(self, x):
        return self.s_e * self.inner.eq(x)

    def ineq(self, x):
        return self.s_i * self.inner.ineq(x)

    def eq_jac(self, x):
        return self.inner.eq_jac(x).multiply(self.s_e[:, None]).tocsr()

    def ineq_jac(self, x):
        return self.inner.ineq_jac(x).multiply(self.s_i[:, None]).tocsr()

    def lag_hess(self, x, y, z):
        return (self.s_f * self.inner.lag_hess(x, self.s_e * y / self.s_f,
                                               self.s_i * z / self.s_f)).tocsr()

    def cost_gn_hess(self, x):
        return (self.s_f * self.inner.cost_gn_hess(x)).tocsr()


def solve_nlp(problem, x0: Array, *, mu_init: float = 0.1, tol: float = 1e-8,
              max_iter: int = 3000, hessian: str = "exact",
              warm_y: Array | None = None, warm_z: Array | None = None,
              frac_to_boundary: float = 0.995, callback=None,
              stall_limit: int = 100, scale: bool = True,
              debug: bool = False) -> NlpSolution:
    """Run the interior-point iteration from x0 down to the KKT tolerance.

    ``hessian`` selects 'exact', 'gauss-newton', or 'lbfgs'. Warm-started
    multipliers are clipped into validity. Non-convergence within the
    iteration cap returns a solution with ``stats.converged = False``.
    """
    if hessian not in ("exact", "gauss-newton", "lbfgs"):
        raise ValueError(f"unknown hessian mode {hessian!r}")
    t_start = time.perf_counter()
    x = np.asarray(x0, dtype=float).copy()
    if scale:
        problem = _ScaledProblem(problem, x)
        if warm_y is not None:
            warm_y = problem.s_f * warm_y / problem.s_e
        if warm_z is not None:
            warm_z = problem.s_f * warm_z / problem.s_i
    c_i = problem.ineq(x)
    m_e = problem.eq(x).shape[0]
    m_i = c_i.shape[0]
    s = np.maximum(-c_i, 1e-3)
    mu = float(mu_init)
    if warm_z is not None:
        z = np.clip(warm_z, 1e-8, 1e16)
        # rows that are infeasible at the warm start changed status across a
        # homotopy stage: re-center their duals so they cannot poison the
        # primal-dual scaling
        bad = c_i > 0.0
        z[bad] = mu / s[bad]
    else:
        z = mu / s
    y = np.asarray(warm_y, dtype=float).copy() if warm_y is not None else np.zeros(m_e)
    lbfgs = _LbfgsMemory(problem.n) if hessian == "lbfgs" else None
    eye_n = sp.identity(problem.n, format="csr")
    s_max = 100.0

    frac = frac_to_boundary
    stats = NlpStats()
    e_0 = np.inf
    status = "max_iter"
    steps = 0
    delta_prev = 0.0
    best_e = np.inf
    stall = 0
    use_inertia = _HAVE_CHOLMOD
    flt: list = []
    theta_max = np.inf
    theta_min = 0.0

    def kkt_error(grad_l, c_e, r_i, comp, mu_ref):
        sd = max(s_max, (np.abs(y).sum() + np.abs(z).sum()) / max(1, m_e + m_i)) / s_max
        e = max(float(np.abs(grad_l).max()) / sd if grad_l.size else 0.0,
                float(np.abs(c_e).max()) if m_e else 0.0,
                float(np.abs(r_i).max()) if m_i else 0.0)
        if m_i:
            sc = max(s_max, np.abs(z).sum() / m_i) / s_max
            e = max(e, float(np.abs(comp - mu_ref).max()) / sc)
        return e

    for _ in range(max_iter):
        g = problem.cost_grad(x)
        J_e = problem.eq_jac(x)
        J_i = problem.ineq_jac(x)
        c_e = problem.eq(x)
        c_i = problem.ineq(x)
        r_i = c_i + s
        comp = s * z
        grad_l = g + (J_e.T @ y if m_e else 0.0) + (J_i.T @ z if m_i else 0.0)

        e_0 = kkt_error(grad_l, c_e, r_i, comp, 0.0)
        if callback is not None:
            callback(steps, x, mu, e_0)
        if e_0 <= tol:
            status = "optimal"
            break
        if kkt_error(grad_l, c_e, r_i, comp, mu) <= 10.0 * mu:
            mu_new = max(tol / 11.0, min(0.2 * mu, mu ** 1.5))
            if mu_new < mu:
                mu = mu_new
                flt.clear()
        if e_0 < 0.99 * best_e:
            best_e = e_0
            stall = 0
        else:
            stall += 1
            if stall > stall_limit:
                status = "stalled"
                break

        # Hessian model
        low_rank = None
        if hessian == "exact":
            W = problem.lag_hess(x, y, z)
        elif hessian == "gauss-newton":
            W = problem.cost_gn_hess(x)
        else:
            W = lbfgs.sigma * eye_n
            low_rank = lbfgs.low_rank()

        if m_i:
            sigma_vec = z / s
            JiT_sig = J_i.T.multiply(sigma_vec[None, :]).tocsr()
            W_bar = (W + JiT_sig @ J_i).tocsr()
            rhs_x = -(g + (J_e.T @ y if m_e else 0.0)
                      + J_i.T @ (mu / s + sigma_vec * c_i + z))
        else:
            W_bar = W.tocsr()
            rhs_x = -(g + (J_e.T @ y if m_e else 0.0))
        rhs = np.concatenate([rhs_x, -c_e]) if m_e else rhs_x

        # filter line-search bookkeeping: theta = l1 infeasibility,
        # phi = barrier objective (filter entries are per-mu)
        theta0 = float(np.abs(c_e).sum()) + (float(np.abs(r_i).sum()) if m_i else 0.0)
        phi0 = problem.cost(x) + (-mu * float(np.log(s).sum()) if m_i else 0.0)
        theta_max = max(1e4, 1e4 * theta0) if steps == 0 else theta_max
        theta_min = 1e-4 * max(1.0, theta0) if steps == 0 else theta_min

        # Adaptive primal regularization: warm-start delta from the previous
        # iteration; when the resulting direction cannot achieve a reasonable
        # line-search step, re-solve with a larger delta instead of crawling.
        dx = dy = ds = dz = None
        step_x = step_s = None
        accepted = False
        pure_dual = False
        alpha = 0.0
        delta_w = 0.0 if delta_prev == 0.0 else max(delta_prev / 3.0, 1e-8)
        for attempt in range(10):
            delta_c = 1e-8
            if m_e:
                K = sp.bmat([[W_bar + delta_w * eye_n, J_e.T],
                             [J_e, -delta_c * sp.identity(m_e)]], format="csc")
            else:
                K = (W_bar + delta_w * eye_n).tocsc()
            sol_vec = None
            try:
                lu = spla.splu(K)
                sol_vec = lu.solve(rhs)
            except RuntimeError:
                pass
            if sol_vec is not None and low_rank is not None:
                U, M = low_rank
                P = np.zeros((K.shape[0], U.shape[1]))
                P[:problem.n] = U
                KiP = lu.solve(P)
                try:
                    mid = np.linalg.solve(-M + P.T @ KiP, P.T @ sol_vec)
                    sol_vec = sol_vec - KiP @ mid
                except np.linalg.LinAlgError:
                    sol_vec = None
            if sol_vec is None or not np.all(np.isfinite(sol_vec)):
                delta_w = 1e-4 if delta_w == 0.0 else delta_w * 10.0
                continue
            dx_t = sol_vec[:problem.n]
            dy_t = sol_vec[problem.n:] if m_e else np.zeros(0)
            if use_inertia:
                n_neg = _inertia_negatives(K)
                if n_neg is None or n_neg != m_e:
                    delta_w = 1e-4 if delta_w == 0.0 else delta_w * 8.0
                    continue
            else:
                curv = float(dx_t @ (W_bar @ dx_t)) + delta_w * float(dx_t @ dx_t)
                step_cap = 1e2 * (1.0 + float(np.abs(x).max()))
                if (curv < -1e-10 * max(1.0, float(dx_t @ dx_t))
                        or float(np.abs(dx_t).max()) > step_cap):
                    delta_w = 1e-4 if delta_w == 0.0 else delta_w * 8.0
                    continue
            ds_t = -(r_i + J_i @ dx_t) if m_i else np.zeros(0)
            dz_t = (mu / s - z - sigma_vec * ds_t) if m_i else np.zeros(0)
            a_primal = _max_step(s, ds_t, frac) if m_i else 1.0

            primal_scale = float(np.abs(dx_t).max()) / (1.0 + float(np.abs(x).max()))
            if m_i and ds_t.size:
                primal_scale = max(primal_scale, float(np.abs(ds_t).max())
                                   / (1.0 + float(np.abs(s).max())))
            if primal_scale < 1e-9:
                # pure multiplier update; no merit question to ask
                dx, dy, ds, dz = dx_t, dy_t, ds_t, dz_t
                alpha = a_primal
                step_x = x + alpha * dx
                step_s = s + alpha * ds if m_i else s
                pure_dual = True
                accepted = True
                break

            dphi = float(g @ dx_t) - (mu * float((ds_t / s).sum()) if m_i else 0.0)
            noise = 4e-11 * (1.0 + abs(phi0))

            def theta_phi(x_try, s_try):
                if m_i and s_try.min() <= 0.0:
                    return np.inf, np.inf
                th = float(np.abs(problem.eq(x_try)).sum()) + (
                    float(np.abs(problem.ineq(x_try) + s_try).sum()) if m_i else 0.0)
                ph = problem.cost(x_try) + (
                    -mu * float(np.log(s_try).sum()) if m_i else 0.0)
                return th, ph

            def filter_ok(th, ph):
                if not np.isfinite(th) or not np.isfinite(ph) or th > theta_max:
                    return False
                for (th_j, ph_j) in flt:
                    if th >= (1.0 - 1e-5) * th_j and ph >= ph_j - 1e-5 * th_j:
                        return False
                return (th < (1.0 - 1e-5) * theta0) or (ph < phi0 - 1e-5 * theta0 + noise)

            # f-type switching: near-feasible with strong objective descent
            def f_type(alpha_v):
                return (theta0 <= theta_min and dphi < 0.0
                        and alpha_v * (-dphi) ** 2.3 > 1.0 * theta0 ** 1.1)

            alpha_t = a_primal
            ok = False
            h_type = False
            step_x = step_s = None
            for ls in range(12):
                x_t = x + alpha_t * dx_t
                s_t = s + alpha_t * ds_t if m_i else s
                th_t, ph_t = theta_phi(x_t, s_t)
                if f_type(alpha_t):
                    if np.isfinite(ph_t) and ph_t <= phi0 + 1e-4 * alpha_t * dphi + noise:
                        ok = True
                        step_x, step_s = x_t, s_t
                        break
                elif filter_ok(th_t, ph_t):
                    ok = True
                    h_type = True
                    step_x, step_s = x_t, s_t
                    break
                if ls == 0 and np.isfinite(th_t):
                    # second-order correction: cancel the curvature-induced
                    # constraint violation at the trial point (Maratos fix)
                    c_e_t = problem.eq(x_t)
                    rhs_soc = np.concatenate([np.zeros(problem.n), -c_e_t]) if m_e \
                        else np.zeros(problem.n)
                    cor = lu.solve(rhs_soc)
                    dxc = cor[:problem.n]
                    if float(np.abs(dxc).max()) <= 2.0 * float(np.abs(alpha_t * dx_t).max()):
                        x_t2 = x_t + dxc
                        if m_i:
                            c_i_t = problem.ineq(x_t)
                            dsc = -(c_i_t + s_t) - (J_i @ dxc)
                            bsc = _max_step(s_t, dsc, frac)
                            s_t2 = s_t + bsc * dsc
                        else:
                            s_t2 = s_t
                        th_t2, ph_t2 = theta_phi(x_t2, s_t2)
                        if f_type(alpha_t):
                            if np.isfinite(ph_t2) and ph_t2 <= phi0 + 1e-4 * alpha_t * dphi + noise:
                                ok = True
                                step_x, step_s = x_t2, s_t2
                                break
                        elif filter_ok(th_t2, ph_t2):
                            ok = True
                            h_type = True
                            step_x, step_s = x_t2, s_t2
                            break
                alpha_t *= 0.5
            if ok:
                if h_type:
                    flt.append(((1.0 - 1e-5) * theta0, phi0 - 1e-5 * theta0))
                    if len(flt) > 200:
                        flt.pop(0)
                dx, dy, ds, dz = dx_t, dy_t, ds_t, dz_t
                alpha = alpha_t
                accepted = True
                break
            # total line-search failure: regularize harder and re-solve
            if debug:
                print(f"    [reg] attempt={attempt} dw={delta_w:.1e} a_primal={a_primal:.2e} "
                      f"alpha_t={alpha_t:.2e} dphi={dphi:.2e} phi0={phi0:.6e} "
                      f"|dx|={float(np.abs(dx_t).max()):.2e}", flush=True)
            dx, dy, ds, dz = dx_t, dy_t, ds_t, dz_t  # keep latest for fallback
            delta_w = 1e-4 if delta_w == 0.0 else delta_w * 8.0
            if delta_w > 1e6:
                break
        if dx is None:
            status = "linear_solver_failed"
            break
        delta_prev = min(delta_w, 1e4) if delta_w > 0.0 else 0.0

        a_dual = _max_step(z, dz, frac) if m_i else 1.0
        if accepted:
            x_t = step_x
            s_t = step_s
        else:
            # last resort: cautious small step along the latest direction
            alpha = min(1e-4, _max_step(s, ds, frac) if m_i else 1.0)
            x_t = x + alpha * dx
            s_t = np.maximum(s + alpha * ds, 1e-16) if m_i else s
        if debug:
            print(f"  [nlp] it={steps} mu={mu:.2e} E0={e_0:.3e} dw={delta_w:.1e} "
                  f"|dx|={float(np.abs(dx).max()):.2e} a={alpha:.2e} acc={accepted} "
                  f"theta={theta0:.2e}", flush=True)

        if lbfgs is not None:
            y_new = y + alpha * dy if m_e else y
            z_new = np.clip(z + a_dual * dz, 1e-14, 1e16) if m_i else z
            glag_old = g + (J_e.T @ y_new if m_e else 0.0) + (J_i.T @ z_new if m_i else 0.0)

        x_prev = x
        x = x_t
        s = s_t
        y = y + alpha * dy if m_e else y
        z = np.clip(z + a_dual * dz, 1e-14, 1e16) if m_i else z
        if m_i:
            # keep z within a kappa-neighborhood of mu/s to bound Sigma
            kap = 1e10
            z = np.minimum(np.maximum(z, mu / (kap * s)), kap * mu / s)
        steps += 1

        if lbfgs is not None:
            g_n = problem.cost_grad(x)
            glag_new = (g_n + (problem.eq_jac(x).T @ y if m_e else 0.0)
                        + (problem.ineq_jac(x).T @ z if m_i else 0.0))
            lbfgs.update(x - x_prev, glag_new - glag_old)

    stats.iterations = steps
    stats.converged = status == "optimal"
    stats.status = status
    stats.kkt_residual = float(e_0)
    stats.mu_final = mu
    stats.wall_time = time.perf_counter() - t_start
    if scale:
        y = problem.s_e * y / problem.s_f
        z = problem.s_i * z / problem.s_f
        stats.cost = float(problem.inner.cost(x))
    else:
        stats.cost = float(problem.cost(x))
    return NlpSolution(x=x, y=y, z=z, s=s if m_i else np.zeros(0), stats=stats)
