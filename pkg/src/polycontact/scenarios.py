"""Built-in desk-scale benchmark scenarios.

A 4 cm cube is inserted into a slot formed by a floor, four walls, and an
approach table flush with the wall tops (six contact pairs). Scenario
offsets push the compliant copies sideways so the optimizer has to exploit
wall contacts to funnel every copy into the slot.
"""
from __future__ import annotations

import numpy as np

from .geometry import BodySpec, Pose, box_polytope
from .ocp import OcpConfig

CUBE_HALF = 0.02          # m
CLEARANCE = 0.002         # m per side
WALL_T = 0.01             # wall thickness
WALL_H = 0.04             # wall height above the floor
FLOOR_T = 0.01


def cube_in_slot_body(mass: float = 0.1) -> BodySpec:
    """Cube vs. slot (floor + 4 walls + approach table): 6 contact pairs."""
    a = CUBE_HALF
    w = a + CLEARANCE                    # inner half-width of the slot
    cube = box_polytope([a, a, a])
    inertia = mass * (2 * a) ** 2 / 6.0
    floor = box_polytope([0.12, 0.12, FLOOR_T],
                         Pose(np.array([0.0, 0.0, -FLOOR_T]), np.array([1.0, 0, 0, 0])))
    wall_cx = w + WALL_T
    zc = WALL_H / 2.0
    wall_px = box_polytope([WALL_T, 0.12, WALL_H / 2],
                           Pose(np.array([wall_cx, 0.0, zc]), np.array([1.0, 0, 0, 0])))
    wall_mx = box_polytope([WALL_T, 0.12, WALL_H / 2],
                           Pose(np.array([-wall_cx, 0.0, zc]), np.array([1.0, 0, 0, 0])))
    wall_py = box_polytope([0.12, WALL_T, WALL_H / 2],
                           Pose(np.array([0.0, wall_cx, zc]), np.array([1.0, 0, 0, 0])))
    wall_my = box_polytope([0.12, WALL_T, WALL_H / 2],
                           Pose(np.array([0.0, -wall_cx, zc]), np.array([1.0, 0, 0, 0])))
    table = box_polytope([0.06, 0.12, WALL_H / 2],
                         Pose(np.array([-(wall_cx + WALL_T + 0.06), 0.0, zc]),
                              np.array([1.0, 0, 0, 0])))
    env = [floor, wall_px, wall_mx, wall_py, wall_my, table]
    return BodySpec(mass=mass, inertia=[inertia] * 3, actuated=[cube],
                    environment=env, pairs=[(0, j) for j in range(6)])


def cube_in_slot_config(N: int = 50, n_s: int = 3, n_hom: int = 5,
                        mode: str = "smoothing", hessian: str = "exact",
                        tol: float = 1e-6, delta_hat: float = 0.005) -> OcpConfig:
    """Benchmark parameters following the reference parameter table style."""
    x0 = np.zeros(13)
    x0[2] = 0.10
    x0[3] = 1.0
    x_goal = np.zeros(13)
    x_goal[2] = CUBE_HALF
    x_goal[3] = 1.0
    dirs = np.array([[0.7071067811865476, -0.7071067811865476, 0.0],
                     [-0.7071067811865476, -0.7071067811865476, 0.0],
                     [0.0, 1.0, 0.0]])
    if n_s > 3:
        extra = np.array([[1.0, 0, 0], [0, -1.0, 0], [-1.0, 0, 0]])
        dirs = np.vstack([dirs, extra])[:n_s]
    return OcpConfig(
        N=N, dt=0.04, n_s=n_s, k_t=50.0, k_r=5.0, n_hom=n_hom,
        tau_1=0.0025, sigma_1=0.00125, mu_init_1=1.0,
        kappa_tau=0.5, kappa_sigma=0.5, kappa_mu=0.1,
        beta_r=[1.0, 0.1, 100.0, 10.0], beta_c=[1.0, 0.1, 10000.0, 1000.0],
        delta_hat=delta_hat, rho_dir=dirs[:n_s], x0=x0, x_goal=x_goal,
        mode=mode, hessian=hessian, tol=tol)


def free_reach_body() -> BodySpec:
    """Cube far above a slab: contact-free motion for smoke scenarios."""
    cube = box_polytope([0.05, 0.05, 0.05])
    slab = box_polytope([0.4, 0.4, 0.05],
                        Pose(np.array([0.0, 0.0, -0.6]), np.array([1.0, 0, 0, 0])))
    return BodySpec(mass=0.1, inertia=[2e-4] * 3, actuated=[cube],
                    environment=[slab], pairs=[(0, 0)])


def free_reach_config(N: int = 10, n_s: int = 1, n_hom: int = 2,
                      tol: float = 1e-6) -> OcpConfig:
    x0 = np.zeros(13)
    x0[2] = 0.2
    x0[3] = 1.0
    xg = np.zeros(13)
    xg[0] = 0.1
    xg[2] = 0.25
    xg[3] = 1.0
    dirs = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])[:n_s]
    return OcpConfig(
        N=N, dt=0.04, n_s=n_s, k_t=50.0, k_r=5.0, n_hom=n_hom,
        tau_1=0.0025, sigma_1=0.00125, mu_init_1=1.0,
        kappa_tau=0.5, kappa_sigma=0.5, kappa_mu=0.1,
        beta_r=[1.0, 0.1, 100.0, 10.0], beta_c=[1.0, 0.1, 10000.0, 1000.0],
        delta_hat=0.01, rho_dir=dirs, x0=x0, x_goal=xg, tol=tol)
