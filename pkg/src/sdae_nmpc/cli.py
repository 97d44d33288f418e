"""Command-line front end.

Subcommands
-----------
simulate
    Closed-loop NMPC runs (one per seed) writing a trajectory CSV and a
    JSON summary per seed.
integrate
    Open-loop ESDIRK run from the scenario's initial point, holding the
    initial input, with per-interval sensitivities.
solve-ocp
    A single OCP solve at ``t = 0`` from the filter's initial estimate.

Log verbosity comes from the ``SDAE_NMPC_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``...).  Exit codes: 0 success, 2 invalid
scenario or arguments, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .errors import ParseError, RunError, SdaeError
from .esdirk import integrate
from .nmpc import ClosedLoopLog, run_closed_loop
from .ocp import OcpProblem
from .scenario import (MINUTE, build_scenario, dump_scenario, load_scenario, load_yaml,
                       parse_scenario_text)
from .sqp import sqp_solve

log = logging.getLogger("sdae_nmpc")

LOG_ENV = "SDAE_NMPC_LOG"
EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 2, 3

TRAJECTORY_COLUMNS = (
    "t_min", "T_true", "T_in_true", "U_cell", "I", "T_measured", "T_hat", "T_in_hat",
    "P_T", "P_T_in", "f_in", "z_bar", "sqp_iterations",
)
INTEGRATE_COLUMNS = ("t_min", "T", "T_in", "U_cell", "I")
OCP_COLUMNS = ("t_min", "T", "T_in", "U_cell", "I", "f_in", "z_bar")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".12g")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def trajectory_rows(run: ClosedLoopLog, T_s: float, final_setpoint: float):
    """Rows of the trajectory CSV: one per sampling instant, ``len(run) + 1`` in total.

    The last row holds the plant state after the final interval; the
    estimate columns there are the one-step prediction and the
    measurement, input and iteration columns are empty.
    """
    rows = []
    for k, st in enumerate(run.steps):
        rows.append((st.t / MINUTE, *st.x_true, *st.y_true, st.y_meas[0], *st.x_filt,
                     *st.P_filt_diag, st.u[0], st.setpoint[0], st.sqp_iterations))
    est = run.final_estimate
    K = len(run.steps)
    rows.append((K * T_s / MINUTE, *run.x_final, *run.y_final, None, *est.x,
                 *np.diag(est.P), None, final_setpoint, None))
    return rows


def summarize(run: ClosedLoopLog, setpoint, u_min, u_max, final_T=None) -> dict:
    """Tracking RMSE per constant-setpoint segment, bound violations and work counters."""
    T = np.append(run.array("x_true")[:, 0], [] if final_T is None else [final_T])
    z = np.asarray(setpoint, dtype=float).reshape(-1)[:len(T)]
    segments = []
    start = 0
    for i in range(1, len(z) + 1):
        if i == len(z) or z[i] != z[start]:
            err = T[start:i] - z[start]
            segments.append({"setpoint": float(z[start]), "first": start, "last": i - 1,
                             "rmse": float(np.sqrt(np.mean(err ** 2)))})
            start = i
    u = run.array("u")
    viol = int(np.sum((u < np.asarray(u_min) - 1e-9) | (u > np.asarray(u_max) + 1e-9)))
    return {
        "steps": len(run),
        "segments": segments,
        "constraint_violations": viol,
        "newton_iterations": int(run.array("newton_iterations").sum()),
        "sqp_iterations": int(run.array("sqp_iterations").sum()),
        "sqp_all_converged": bool(run.array("sqp_converged").all()),
    }


def _run_seed(cfg: dict, seed: int, out: Path) -> dict:
    sc = build_scenario(cfg, seed=seed)
    run = run_closed_loop(sc)
    K = sc.total_steps
    rows = trajectory_rows(run, sc.T_s, float(sc.setpoint[K, 0]))
    _write_csv(out / f"trajectory_seed{seed}.csv", TRAJECTORY_COLUMNS, rows)
    summary = summarize(run, sc.setpoint[:K + 1], sc.ocp.u_min, sc.ocp.u_max,
                        final_T=run.x_final[0])
    summary["seed"] = seed
    _write_json(out / f"summary_seed{seed}.json", summary)
    return summary


def _parse_seeds(text: str):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ParseError(f"--seed expects integers separated by commas, got {text!r}") from None
    if not seeds:
        raise ParseError("--seed is empty")
    return seeds


def _set_path(cfg: dict, dotted: str, raw: str):
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ParseError(f"unknown key {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ParseError(f"unknown key {dotted!r}")
    try:
        node[keys[-1]] = load_yaml(raw)
    except yaml.YAMLError as exc:
        raise ParseError(f"--set {dotted}: {exc}") from None


def _load_config(args) -> dict:
    cfg = load_scenario(args.scenario)
    if args.method:
        cfg["integrator"]["method"] = args.method.upper()
    if args.steps_per_interval is not None:
        cfg["integrator"]["steps_per_interval"] = args.steps_per_interval
    if getattr(args, "sigma", None) is not None:
        cfg["plant"]["sigma"] = args.sigma
    if getattr(args, "measurement_noise", None) is not None:
        cfg["measurement"]["noise"] = args.measurement_noise
    if getattr(args, "total_steps", None) is not None:
        cfg["total_steps"] = args.total_steps
    for item in args.set or ():
        if "=" not in item:
            raise ParseError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(cfg, key.strip(), raw)
    # re-validate after overrides
    return parse_scenario_text(dump_scenario(cfg))


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    seeds = _parse_seeds(args.seed) if args.seed else [int(cfg["seed"])]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.yaml").write_text(dump_scenario(cfg), encoding="utf-8")
    if args.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_run_seed, [cfg] * len(seeds), seeds,
                                      [out] * len(seeds)))
    else:
        summaries = [_run_seed(cfg, s, out) for s in seeds]
    if len(seeds) > 1:
        rmse = np.array([[seg["rmse"] for seg in s["segments"]] for s in summaries])
        _write_json(out / "summary.json", {
            "seeds": seeds,
            "mean_segment_rmse": rmse.mean(axis=0).tolist(),
            "constraint_violations": sum(s["constraint_violations"] for s in summaries),
            "newton_iterations": sum(s["newton_iterations"] for s in summaries),
        })
    for s in summaries:
        seg = ", ".join(f"{x['setpoint']:g}: {x['rmse']:.3f}" for x in s["segments"])
        print(f"seed {s['seed']}: segment RMSE [{seg}], violations {s['constraint_violations']}")
    return EXIT_OK


def cmd_integrate(args) -> int:
    cfg = _load_config(args)
    sc = build_scenario(cfg)
    n = args.intervals or sc.total_steps
    s = np.concatenate([sc.x0, sc.y0])
    rows = [(0.0, *s)]
    sens = []
    newton = 0
    for k in range(n):
        traj = integrate(sc.model, sc.ocp.method, k * sc.T_s, (k + 1) * sc.T_s, s, sc.u_prev,
                         sc.disturbance[k], sc.ocp.steps, settings=sc.ocp.newton,
                         sensitivities=True)
        newton += int(sum(int(r.iterations.sum()) for r in traj.records))
        s = traj.final
        rows.append(((k + 1) * sc.T_s / MINUTE, *s))
        sens.append({"interval": k, "ds_ds0": traj.sens.ds_ds0.tolist(),
                     "ds_du": traj.sens.ds_du.tolist()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "integrate.csv", INTEGRATE_COLUMNS, rows)
    _write_json(out / "sensitivities.json", {"method": sc.ocp.method,
                                             "steps_per_interval": sc.ocp.steps,
                                             "newton_iterations": newton,
                                             "intervals": sens})
    print(f"integrated {n} intervals with {sc.ocp.method}: final state {np.round(s, 4).tolist()}")
    return EXIT_OK


def cmd_solve_ocp(args) -> int:
    cfg = _load_config(args)
    sc = build_scenario(cfg)
    N = sc.ocp.N
    problem = OcpProblem(sc.model, sc.ocp, sc.x_hat0, sc.u_prev, sc.disturbance[:N],
                         sc.setpoint[:N + 1], t0=0.0)
    w0 = problem.initial_guess(sc.y0, np.clip(sc.u_prev, sc.ocp.u_min, sc.ocp.u_max))
    res = sqp_solve(problem, w0, sc.sqp)
    L = problem.layout
    wx, wy, u = L.split(res.w)
    rows = []
    for j in range(N + 1):
        y = wy[j] if j < N else [None] * sc.model.ny
        uj = u[j, 0] if j < N else None
        rows.append((j * sc.T_s / MINUTE, *wx[j], *y, uj, sc.setpoint[j, 0]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ocp.csv", OCP_COLUMNS, rows)
    _write_json(out / "ocp_summary.json", {
        "iterations": res.iterations, "converged": res.converged, "status": res.status,
        "kkt": res.kkt, "feasibility": res.feasibility, "phi": res.phi,
        "newton_iterations": problem.newton_iterations, "u0": res.u0(L).tolist()})
    print(f"SQP {res.status} after {res.iterations} iterations, u0 = {res.u0(L)[0]:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdae-nmpc",
                                     description="ESDIRK-based NMPC for index-1 SDAEs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", help="scenario YAML (default: bundled scenario)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--method", type=str.upper, choices=("ESDIRK12", "ESDIRK23", "ESDIRK34"))
        p.add_argument("--steps-per-interval", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scenario entry, e.g. ocp.Q_z=5 (repeatable)")

    p = sub.add_parser("simulate", help="closed-loop NMPC simulation")
    common(p)
    p.add_argument("--seed", help="seed or comma-separated seeds")
    p.add_argument("--sigma", type=float,
                   help="plant diffusion on the inlet temperature, degC/sqrt(s)")
    p.add_argument("--measurement-noise", type=float, help="measurement noise variance")
    p.add_argument("--total-steps", type=int)
    p.add_argument("--jobs", type=int, default=1, help="worker processes across seeds")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("integrate", help="open-loop integration with sensitivities")
    common(p)
    p.add_argument("--intervals", type=int, help="sampling intervals (default: total_steps)")
    p.set_defaults(func=cmd_integrate)

    p = sub.add_parser("solve-ocp", help="single OCP solve at t = 0")
    common(p)
    p.set_defaults(func=cmd_solve_ocp)
    return parser


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunError as exc:
        print(f"error: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_FAILURE
    except SdaeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
