"""Configuration documents: body definitions and scenario parameters.

Bodies and scenarios are plain JSON-compatible trees. A body document has

    {"mass": ..., "inertia": [..3..],
     "actuated": [{"G": [[..3..]..], "h": [..], "offset_pos": [..3..],
                   "offset_quat": [..4..]}, ...],
     "environment": [...same shape...],
     "pairs": [[i, j], ...]}

and a scenario document carries the trajectory-optimization keys (named as
in the benchmark parameter tables) plus initial/goal states::

    N, dt, n_s, k_t, k_r, n_hom, tau_1, sigma_1, mu_init_1, kappa_tau,
    kappa_sigma, kappa_mu, beta_r_1..4, beta_c_1..4, delta_hat, rho_dir,
    x_0, x_goal, mode, hessian, tol
"""
from __future__ import annotations

import json

import numpy as np

from .geometry import BodySpec, GeometryError, Polytope, Pose, validate_polytope
from .ocp import OcpConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration document."""


def _polytope_from_dict(d: dict, where: str) -> Polytope:
    try:
        G = np.asarray(d["G"], dtype=float)
        h = np.asarray(d["h"], dtype=float)
    except KeyError as exc:
        raise ConfigError(f"{where}: missing field {exc}") from None
    pos = np.asarray(d.get("offset_pos", [0.0, 0.0, 0.0]), dtype=float)
    quat = np.asarray(d.get("offset_quat", [1.0, 0.0, 0.0, 0.0]), dtype=float)
    try:
        return validate_polytope(Polytope(G, h, Pose(pos, quat)))
    except GeometryError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def body_from_dict(doc: dict) -> BodySpec:
    try:
        actuated = [_polytope_from_dict(p, f"actuated[{i}]")
                    for i, p in enumerate(doc["actuated"])]
        environment = [_polytope_from_dict(p, f"environment[{i}]")
                       for i, p in enumerate(doc["environment"])]
        pairs = [tuple(p) for p in doc["pairs"]]
        return BodySpec(mass=float(doc["mass"]),
                        inertia=np.asarray(doc["inertia"], dtype=float),
                        actuated=actuated, environment=environment, pairs=pairs)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, GeometryError) as exc:
        raise ConfigError(f"invalid body document: {exc}") from exc


def load_body(path: str) -> BodySpec:
    with open(path) as fh:
        return body_from_dict(json.load(fh))


def ocp_config_from_dict(doc: dict) -> OcpConfig:
    try:
        return OcpConfig(
            N=int(doc["N"]), dt=float(doc["dt"]), n_s=int(doc["n_s"]),
            k_t=float(doc["k_t"]), k_r=float(doc["k_r"]),
            n_hom=int(doc["n_hom"]), tau_1=float(doc["tau_1"]),
            sigma_1=float(doc["sigma_1"]), mu_init_1=float(doc["mu_init_1"]),
            kappa_tau=float(doc["kappa_tau"]), kappa_sigma=float(doc["kappa_sigma"]),
            kappa_mu=float(doc["kappa_mu"]),
            beta_r=[float(doc[f"beta_r_{i}"]) for i in (1, 2, 3, 4)],
            beta_c=[float(doc[f"beta_c_{i}"]) for i in (1, 2, 3, 4)],
            delta_hat=float(doc["delta_hat"]),
            rho_dir=np.asarray(doc["rho_dir"], dtype=float),
            x0=np.asarray(doc["x_0"], dtype=float),
            x_goal=np.asarray(doc["x_goal"], dtype=float),
            mode=doc.get("mode", "smoothing"),
            hessian=doc.get("hessian", "exact"),
            tol=float(doc.get("tol", 1e-6)),
            ip_tol=float(doc.get("ip_tol", 1e-10)),
            ip_max_iter=int(doc.get("ip_max_iter", 60)),
            max_nlp_iter=int(doc.get("max_nlp_iter", 3000)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario document: {exc}") from exc


def load_ocp_config(path: str) -> OcpConfig:
    with open(path) as fh:
        return ocp_config_from_dict(json.load(fh))


def ocp_config_to_dict(cfg: OcpConfig) -> dict:
    doc = {
        "N": cfg.N, "dt": cfg.dt, "n_s": cfg.n_s, "k_t": cfg.k_t, "k_r": cfg.k_r,
        "n_hom": cfg.n_hom, "tau_1": cfg.tau_1, "sigma_1": cfg.sigma_1,
        "mu_init_1": cfg.mu_init_1, "kappa_tau": cfg.kappa_tau,
        "kappa_sigma": cfg.kappa_sigma, "kappa_mu": cfg.kappa_mu,
        "delta_hat": cfg.delta_hat, "rho_dir": cfg.rho_dir.tolist(),
        "x_0": cfg.x0.tolist(), "x_goal": cfg.x_goal.tolist(),
        "mode": cfg.mode, "hessian": cfg.hessian, "tol": cfg.tol,
        "ip_tol": cfg.ip_tol, "ip_max_iter": cfg.ip_max_iter,
        "max_nlp_iter": cfg.max_nlp_iter,
    }
    for i in (1, 2, 3, 4):
        doc[f"beta_r_{i}"] = float(cfg.beta_r[i - 1])
        doc[f"beta_c_{i}"] = float(cfg.beta_c[i - 1])
    return doc


def body_to_dict(body: BodySpec) -> dict:
    def poly(p: Polytope) -> dict:
        return {"G": p.G.tolist(), "h": p.h.tolist(),
                "offset_pos": p.offset_pose.rho.tolist(),
                "offset_quat": p.offset_pose.xi.tolist()}

    return {"mass": body.mass, "inertia": body.inertia.tolist(),
            "actuated": [poly(p) for p in body.actuated],
            "environment": [poly(p) for p in body.environment],
            "pairs": [list(p) for p in body.pairs]}
