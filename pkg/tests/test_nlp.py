"""Interior-point NLP solver on problems with known solutions."""
import numpy as np
import pytest
import scipy.sparse as sp

from polycontact import nlp


class ConstrainedQp:
    """min 0.5 x'Qx + c'x  s.t.  sum(x) = 1,  x >= 0."""

    n = 5

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(5, 5))
        self.Q = A @ A.T + np.eye(5)
        self.c = rng.normal(size=5)

    def cost(self, x):
        return 0.5 * x @ self.Q @ x + self.c @ x

    def cost_grad(self, x):
        return self.Q @ x + self.c

    def eq(self, x):
        return np.array([x.sum() - 1.0])

    def ineq(self, x):
        return -x

    def eq_jac(self, x):
        return sp.csr_matrix(np.ones((1, 5)))

    def ineq_jac(self, x):
        return sp.csr_matrix(-np.eye(5))

    def lag_hess(self, x, y, z):
        return sp.csr_matrix(self.Q)

    def cost_gn_hess(self, x):
        return sp.csr_matrix(self.Q)


class CircleRosenbrock:
    """Rosenbrock restricted to the unit disc (known boundary optimum)."""

    n = 2

    def cost(self, x):
        return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2

    def cost_grad(self, x):
        return np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2),
                         200 * (x[1] - x[0] ** 2)])

    def eq(self, x):
        return np.zeros(0)

    def ineq(self, x):
        return np.array([x @ x - 1.0])

    def eq_jac(self, x):
        return sp.csr_matrix((0, 2))

    def ineq_jac(self, x):
        return sp.csr_matrix(2 * x.reshape(1, 2))

    def lag_hess(self, x, y, z):
        H = np.array([[2 - 400 * (x[1] - 3 * x[0] ** 2), -400 * x[0]],
                      [-400 * x[0], 200.0]])
        return sp.csr_matrix(H + z[0] * 2 * np.eye(2))

    def cost_gn_hess(self, x):
        J = np.array([[-1.0, 0.0], [-20 * x[0], 10.0]])
        return sp.csr_matrix(2 * J.T @ J)


@pytest.mark.parametrize("mode", ["exact", "gauss-newton", "lbfgs"])
def test_qp_all_modes(mode):
    sol = nlp.solve_nlp(ConstrainedQp(), np.full(5, 0.2), mu_init=0.1,
                        tol=1e-10, hessian=mode, max_iter=200)
    assert sol.stats.converged
    # KKT by hand: nonnegativity, feasibility, complementarity
    assert abs(sol.x.sum() - 1.0) <= 1e-8
    assert np.all(sol.x >= -1e-10)
    assert np.all(sol.x * sol.z <= 1e-7)


def test_qp_mode_iteration_ordering():
    its = {}
    for mode in ("exact", "lbfgs"):
        sol = nlp.solve_nlp(ConstrainedQp(), np.full(5, 0.2), mu_init=0.1,
                            tol=1e-10, hessian=mode, max_iter=200)
        its[mode] = sol.stats.iterations
    assert its["exact"] <= its["lbfgs"]


def test_rosenbrock_on_disc():
    sol = nlp.solve_nlp(CircleRosenbrock(), np.array([-0.5, 0.5]), mu_init=0.1,
                        tol=1e-9, hessian="exact", max_iter=400)
    assert sol.stats.converged
    assert np.allclose(sol.x, [0.7864, 0.6177], atol=1e-3)
    assert sol.x @ sol.x <= 1.0 + 1e-9


def test_infeasible_start_recovers():
    sol = nlp.solve_nlp(ConstrainedQp(), np.full(5, -2.0), mu_init=1.0,
                        tol=1e-9, hessian="exact", max_iter=300)
    assert sol.stats.converged


def test_warm_start_multipliers():
    p = ConstrainedQp()
    first = nlp.solve_nlp(p, np.full(5, 0.2), mu_init=0.1, tol=1e-10)
    again = nlp.solve_nlp(p, first.x, mu_init=1e-8, tol=1e-10,
                          warm_y=first.y, warm_z=first.z)
    assert again.stats.converged
    assert again.stats.iterations <= 5


def test_nonconvergence_reported():
    sol = nlp.solve_nlp(CircleRosenbrock(), np.array([-0.5, 0.5]), mu_init=0.1,
                        tol=1e-12, hessian="lbfgs", max_iter=3)
    assert not sol.stats.converged
    assert sol.stats.status in ("max_iter", "stalled")
