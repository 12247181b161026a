"""Command-line driver: scenario execution and figure-data emission.

Subcommands:
  sdf-grid   sample the 2D smoothed distance field on a grid, one CSV per tau
  simulate   forward-simulate impedance tracking of a reference
  solve      run the homotopy trajectory optimization for a scenario
  bench      timing/iteration tables across scenario variants

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence,
4 numeric failure. Outputs are deterministic given (config, seed); wall-time
fields live in separate `*_timings` files so result artifacts are
byte-reproducible.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import collision, dynamics, impedance, ocp
from .config import ConfigError, load_body, load_ocp_config
from .geometry import GeometryError, Pose

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOCONV = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _set_threads(args) -> None:
    n = args.threads or os.environ.get("POLYCONTACT_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: str, rows: np.ndarray, fmt: str = "%.12g") -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, np.atleast_2d(rows), fmt=fmt, delimiter=",")


def cmd_sdf_grid(args) -> int:
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
        G = np.asarray(doc["G"], dtype=float)
        h = np.asarray(doc["h"], dtype=float)
        if G.ndim != 2 or G.shape[1] != 2 or G.shape[0] != h.shape[0]:
            raise CliError("sdf-grid config needs 2D polytope rows G (n x 2) and h (n)",
                           EXIT_CONFIG)
        xs = np.linspace(*doc["x_range"], int(doc["nx"]))
        ys = np.linspace(*doc["y_range"], int(doc["ny"]))
        taus = [float(t) for t in doc["tau"]]
    except CliError:
        raise
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise CliError(f"bad sdf-grid config: {exc}", EXIT_CONFIG) from exc
    if xs.size == 0 or ys.size == 0 or not taus:
        raise CliError("empty grid or tau list", EXIT_CONFIG)
    out = _out_dir(args)
    norms = np.linalg.norm(G, axis=1)
    G = G / norms[:, None]
    h = h / norms
    for tau in taus:
        rows = collision.sdf_grid_2d(G, h, xs, ys, tau)
        _write_csv(out / f"sdf_grid_tau_{tau:g}.csv", "x,y,phi,n_x,n_y", rows)
    print(f"wrote {len(taus)} grid files to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        body = load_body(args.body)
        with open(args.config) as fh:
            doc = json.load(fh)
        x0 = np.asarray(doc["x_0"], dtype=float).reshape(13)
        dt = float(doc["dt"])
        N = int(doc["N"])
        tau = float(doc.get("tau", 1e-8))
        sigma = float(doc.get("sigma", 1e-6))
    except (OSError, KeyError, ValueError, TypeError, ConfigError, GeometryError) as exc:
        raise CliError(f"bad simulate config: {exc}", EXIT_CONFIG) from exc
    out = _out_dir(args)
    model = dynamics.ContactModel(body, collision.IpSettings(tau=tau))
    n_p = body.n_pairs
    header = ("step," + ",".join(f"x{i}" for i in range(13))
              + "," + ",".join(f"force_{p}" for p in range(n_p))
              + "," + ",".join(f"gap_{p}" for p in range(n_p)))
    try:
        if "reference" in doc or "x_ref" in doc:
            ref_pose = np.asarray(doc.get("reference", doc.get("x_ref")),
                                  dtype=float).reshape(13)
            ref = np.tile(ref_pose, (N + 1, 1))
            gains = impedance.make_gains(float(doc.get("k_t", 50.0)),
                                         float(doc.get("k_r", 5.0)), body)
            q_hat = Pose(np.asarray(doc.get("offset_pos", [0, 0, 0]), dtype=float),
                         np.asarray(doc.get("offset_quat", [1, 0, 0, 0]), dtype=float))
            res = dynamics.rollout(x0, ref, gains, q_hat, dt, sigma, model)
        else:
            wrench = np.asarray(doc.get("wrench", [0.0] * 6), dtype=float).reshape(6)
            states = np.empty((N + 1, 13))
            states[0] = x0
            forces = np.empty((N, n_p))
            gaps = np.empty((N, n_p))
            x = x0.copy()
            for k in range(N):
                x, lam, contacts, _ = dynamics.simulate_step(
                    x, wrench, dt, sigma, model, seed=k)
                states[k + 1] = x
                forces[k] = lam
                gaps[k] = [c.phi for c in contacts]
            res = dynamics.RolloutResult(states=states, forces=forces, gaps=gaps,
                                         wrenches=np.tile(wrench, (N, 1)))
    except dynamics.StepFailure as exc:
        rows = np.zeros((1, 1 + 13 + 2 * n_p))
        _write_csv(out / "trajectory.csv", header + ",FAILED", rows)
        raise CliError(f"simulation failed: {exc}", EXIT_NUMERIC) from exc
    rows = np.column_stack([
        np.arange(N + 1),
        res.states,
        np.vstack([res.forces, np.full((1, n_p), np.nan)]),
        np.vstack([res.gaps, np.full((1, n_p), np.nan)]),
    ])
    _write_csv(out / "trajectory.csv", header, rows)
    print(f"wrote trajectory to {out / 'trajectory.csv'}")
    return EXIT_OK


def _write_solution(out: Path, cfg, prob, sol, reports) -> None:
    lay = prob.layout
    N, n_s, n_p = cfg.N, cfg.n_s, prob.body.n_pairs
    ref = np.column_stack([np.arange(N + 1),
                           np.stack([sol.x[lay.xr(k)] for k in range(N + 1)])])
    _write_csv(out / "reference.csv",
               "step," + ",".join(f"x{i}" for i in range(13)), ref)
    for l in range(n_s):
        states = np.stack([sol.x[lay.xc(l, k)] for k in range(N + 1)])
        forces = np.vstack([np.stack([sol.x[lay.lam(l, k)] for k in range(N)]),
                            np.full((1, n_p), np.nan)])
        rows = np.column_stack([np.arange(N + 1), states, forces])
        _write_csv(out / f"scenario_{l}.csv",
                   "step," + ",".join(f"x{i}" for i in range(13))
                   + "," + ",".join(f"force_{p}" for p in range(n_p)), rows)
    report = {"stages": [r.as_dict() for r in reports],
              "converged": all(r.converged for r in reports)}
    timing = {"stages": [r.as_dict()["timing"] for r in reports]}
    for stage in report["stages"]:
        stage.pop("timing")
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(out / "report_timings.json", "w") as fh:
        json.dump(timing, fh, indent=2, sort_keys=True)


def cmd_solve(args) -> int:
    try:
        body = load_body(args.body)
        cfg = load_ocp_config(args.config)
        if args.hessian:
            cfg.hessian = {"gn": "gauss-newton"}.get(args.hessian, args.hessian)
        if args.mode:
            cfg.mode = args.mode
    except (OSError, ConfigError, GeometryError, ValueError) as exc:
        raise CliError(f"bad solve scenario: {exc}", EXIT_CONFIG) from exc
    out = _out_dir(args)
    sol, prob, reports = ocp.homotopy_solve(cfg, body)
    _write_solution(out, cfg, prob, sol, reports)
    metrics = ocp.validate_solution(prob, sol.x)
    metrics_doc = {
        "terminal_errors": [{"scenario": i, "translational": t, "rotational": r}
                            for i, (t, r) in enumerate(metrics["terminal_errors"])],
        "max_equality_violation": metrics["max_equality_violation"],
        "max_inequality_violation": metrics["max_inequality_violation"],
        "max_comp_residual": metrics["max_comp_residual"],
    }
    if "rollout_max_deviation" in metrics:
        metrics_doc["rollout_max_deviation"] = metrics["rollout_max_deviation"]
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics_doc, fh, indent=2, sort_keys=True)
    print(f"wrote solution to {out}")
    if not all(r.converged for r in reports):
        print("warning: at least one homotopy stage did not converge", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        body = load_body(args.body)
        cfg = load_ocp_config(args.config)
    except (OSError, ConfigError, GeometryError, ValueError) as exc:
        raise CliError(f"bad bench scenario: {exc}", EXIT_CONFIG) from exc
    if args.seed is None:
        raise CliError("bench requires an explicit --seed", EXIT_CONFIG)
    out = _out_dir(args)

    # contact-info microbenchmark: nominal + first + second derivatives
    rng = np.random.default_rng(args.seed)
    pairs = collision.build_pair_geometries(body.actuated, body.environment,
                                            body.pairs)
    pair = pairs[0]
    settings = collision.IpSettings(tau=1e-8)
    n_eval = int(args.evals)
    pose_vecs = np.empty((n_eval, 7))
    for i in range(n_eval):
        xi = rng.normal(size=4)
        pose_vecs[i, :3] = rng.uniform(-1.5, 1.5, 3)
        pose_vecs[i, 3:] = xi / np.linalg.norm(xi)
    seeds = rng.normal(size=(n_eval, 8))
    t0 = time.perf_counter()
    for i in range(n_eval):
        q = Pose(pose_vecs[i, :3], pose_vecs[i, 3:])
        gamma = collision.ip_solve(collision.assemble_lp(pair, q), settings)
        fd = collision.first_derivatives(pair, gamma, q)
        collision.second_derivatives(fd, seeds[i])
    t_seq = (time.perf_counter() - t0) / n_eval
    t0 = time.perf_counter()
    data = collision.batch_contact_bundle([pair], np.arange(n_eval), pose_vecs,
                                          settings, level=1)
    collision.batch_hessian_seeds(data, seeds)
    t_batch = (time.perf_counter() - t0) / n_eval

    modes = [m for m in (args.modes.split(",") if args.modes else ["smoothing"])]
    rows = []
    timing_rows = []
    for mode in modes:
        cfg_m = load_ocp_config(args.config)
        cfg_m.mode = mode
        sol, prob, reports = ocp.homotopy_solve(cfg_m, body)
        for r in reports:
            rows.append((mode, r.stage, r.iterations, int(r.converged),
                         r.kkt_residual, r.comp_residual))
            timing_rows.append((mode, r.stage, r.time_collision,
                                r.time_constraints, r.time_solver, r.time_total))
    with open(out / "bench.csv", "w") as fh:
        fh.write("mode,stage,iterations,converged,kkt_residual,comp_residual\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    with open(out / "bench_timings.csv", "w") as fh:
        fh.write("mode,stage,sdf_s,constraints_s,solver_s,total_s\n")
        for row in timing_rows:
            fh.write(",".join(f"{v:.6f}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")
        fh.write(f"contact_eval_avg_s,,{t_seq:.9f},,,\n")
        fh.write(f"contact_eval_batched_avg_s,,{t_batch:.9f},,,\n")
    print(f"contact-info evaluation: {t_seq * 1e6:.1f} us/call sequential, "
          f"{t_batch * 1e6:.1f} us/item batched, over {n_eval}")
    print(f"wrote bench tables to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polycontact",
                                description="contact-implicit assembly planning")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread override (also POLYCONTACT_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    sg = sub.add_parser("sdf-grid", help="2D smoothed distance field samples")
    sg.add_argument("--config", required=True)
    sg.add_argument("--out", required=True)
    sg.add_argument("--seed", type=int, default=0)
    sg.set_defaults(func=cmd_sdf_grid)

    sim = sub.add_parser("simulate", help="forward contact simulation")
    sim.add_argument("--body", required=True)
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.set_defaults(func=cmd_simulate)

    so = sub.add_parser("solve", help="homotopy trajectory optimization")
    so.add_argument("--body", required=True)
    so.add_argument("--config", required=True)
    so.add_argument("--out", required=True)
    so.add_argument("--seed", type=int, default=0)
    so.add_argument("--hessian", choices=["exact", "gn", "gauss-newton", "lbfgs"])
    so.add_argument("--mode", choices=["smoothing", "relaxation"])
    so.set_defaults(func=cmd_solve)

    be = sub.add_parser("bench", help="iteration/timing tables")
    be.add_argument("--body", required=True)
    be.add_argument("--config", required=True)
    be.add_argument("--out", required=True)
    be.add_argument("--seed", type=int, default=None)
    be.add_argument("--modes", default=None,
                    help="comma-separated complementarity modes to compare")
    be.add_argument("--evals", type=int, default=1000,
                    help="contact-info microbenchmark sample count")
    be.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (collision.CollisionError, dynamics.StepFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
