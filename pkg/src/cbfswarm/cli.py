"""Command-line surface: simulate runs, oracle solves, invariant checks,
and tidy plot data extraction.

    cbfswarm simulate <scenario.json> --out <dir>
    cbfswarm oracle <scenario.json> [--eps 1e-3]
    cbfswarm verify <scenario.json> [--horizon-s 20]
    cbfswarm plot-data <run-dir> [--out <dir>]

The CBFSWARM_THREADS environment variable selects parallel per-agent QP
evaluation (default 1); results are bit-identical either way.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from .dynamics import AgentState
from .metrics import (
    compute_metrics,
    formation_error_arrays,
    obstacle_distance_arrays,
    tracking_errors,
)
from .qpsolve import solve_centralized_regularized, solve_centralized_unregularized
from .scenario import FLOAT_FMT, from_dict, parse_scenario, to_dict
from .saddleflow import simulate
from .team import build_context

PROP1_EPS = 1e-8
PROP1_TOL = 1e-6
LEMMA_EPS_GRID = (1e-1, 1e-2, 1e-3, 1e-4)
LEMMA_TOL = 1e-3
SAFETY_TOL = 1e-3


def _initial_states(ctx):
    s, theta = ctx.initial_arrays()
    return [
        AgentState(s=(s[i, 0], s[i, 1]), theta=theta[i], id=ctx.agent_ids[i])
        for i in range(ctx.n_agents)
    ]


def cmd_simulate(args) -> int:
    cfg = parse_scenario(args.scenario)
    ctx = build_context(cfg)
    t0 = time.perf_counter()
    log = simulate(cfg, ctx)
    elapsed = time.perf_counter() - t0
    outdir = Path(args.out)
    log.write_csv(outdir)
    report = compute_metrics(log, cfg, ctx, tracking_oracle=args.tracking)
    with open(outdir / "metrics.json", "w") as f:
        json.dump(report.to_dict(), f, indent=2)
        f.write("\n")
    with open(outdir / "config.json", "w") as f:
        json.dump(to_dict(cfg), f, indent=2)
        f.write("\n")
    print(f"simulated {cfg.name}: {log.t[-1]:.1f} s in {elapsed:.1f} s wall")
    print(f"  waypoints reached: {report.all_waypoints_reached}")
    print(f"  min pair margin: {report.min_pair_margin:.6g}")
    if report.min_obstacle_margin:
        worst = min(report.min_obstacle_margin.values())
        print(f"  min obstacle margin: {worst:.6g}")
    print(f"  outputs in {outdir}")
    return 0


def cmd_oracle(args) -> int:
    cfg = parse_scenario(args.scenario)
    ctx = build_context(cfg)
    states = _initial_states(ctx)
    eps = cfg.flow.eps if args.eps is None else float(args.eps)
    waypoint = cfg.waypoints[0]
    if eps == 0.0:
        sol = solve_centralized_unregularized(states, ctx, waypoint)
    else:
        sol = solve_centralized_regularized(states, eps, ctx, waypoint)
    payload = {
        "scenario": cfg.name,
        "eps": eps,
        "status": sol.status,
        "u": sol.u.tolist() if sol.optimal else None,
        "z": sol.z.tolist() if sol.optimal and sol.z is not None else None,
        "lambda": sol.lam.tolist() if sol.optimal else None,
        "objective": sol.objective if sol.optimal else None,
        "kkt_residuals": list(sol.kkt) if sol.optimal else None,
    }
    json.dump(payload, sys.stdout, indent=2)
    print()
    return 0 if sol.optimal else 1


def _verify_line(ok: bool, label: str, detail: str) -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    return ok


def cmd_verify(args) -> int:
    cfg = parse_scenario(args.scenario)
    horizon = min(cfg.horizon, args.horizon_s)
    base = to_dict(cfg)
    base["horizon_s"] = horizon
    cfg = from_dict(base, name=cfg.name)
    ctx = build_context(cfg)
    ok = True

    # short run provides sampled states, safety margins, and the tracking baseline
    log = simulate(cfg, ctx)
    sample_steps = np.unique(
        np.linspace(0, log.s.shape[0] - 1, args.samples).astype(int)
    )

    # coupled-vs-split equivalence at sampled states
    worst = 0.0
    for step in sample_steps:
        states = [
            AgentState(
                s=(log.s[step, i, 0], log.s[step, i, 1]),
                theta=log.theta[step, i],
                id=ctx.agent_ids[i],
            )
            for i in range(ctx.n_agents)
        ]
        waypoint = cfg.waypoints[int(log.waypoint_index[step])]
        reg = solve_centralized_regularized(states, PROP1_EPS, ctx, waypoint)
        unreg = solve_centralized_unregularized(states, ctx, waypoint)
        if not (reg.optimal and unreg.optimal):
            ok = _verify_line(False, "split-equivalence", f"solver failure at step {step}") and ok
            continue
        worst = max(worst, float(np.abs(reg.u - unreg.u).max()))
    ok = _verify_line(worst <= PROP1_TOL, "split-equivalence",
                      f"max |u_split - u_coupled| = {worst:.3g} (tol {PROP1_TOL:g})") and ok

    # regularization sweep at the initial state
    states0 = _initial_states(ctx)
    unreg0 = solve_centralized_unregularized(states0, ctx, cfg.waypoints[0])
    errs = []
    for eps in LEMMA_EPS_GRID:
        reg = solve_centralized_regularized(states0, eps, ctx, cfg.waypoints[0])
        errs.append(float(np.linalg.norm((reg.u - unreg0.u).reshape(-1))))
    monotone = all(errs[k + 1] <= errs[k] + 1e-12 for k in range(len(errs) - 1))
    ok = _verify_line(monotone and errs[-1] <= LEMMA_TOL, "regularization-sweep",
                      f"errors {['%.3g' % e for e in errs]}") and ok

    # safety margins over the short run
    min_margin = float(log.margins.min()) if log.margins.size else 0.0
    ok = _verify_line(min_margin >= -SAFETY_TOL, "safety-margins",
                      f"min margin {min_margin:.6g} (tol -{SAFETY_TOL:g})") and ok
    ok = _verify_line(log.lambda_min >= 0.0, "multiplier-nonnegativity",
                      f"min lambda {log.lambda_min:.3g}") and ok

    # tracking improves when the flow runs faster
    errs_here, _ = tracking_errors(log, ctx)
    fast = to_dict(cfg)
    fast["flow"]["tau_s"] = cfg.flow.tau / 10.0
    fast["flow"]["substeps"] = cfg.flow.substeps * 10
    cfg_fast = from_dict(fast, name=cfg.name + "-fast")
    ctx_fast = build_context(cfg_fast)
    log_fast = simulate(cfg_fast, ctx_fast)
    errs_fast, _ = tracking_errors(log_fast, ctx_fast)
    if errs_here.size and errs_fast.size:
        ok = _verify_line(
            float(errs_fast.max()) < float(errs_here.max()),
            "tracking-improves-with-faster-flow",
            f"sup {errs_fast.max():.3g} (tau/10) vs {errs_here.max():.3g} (tau)",
        ) and ok
    else:
        ok = _verify_line(False, "tracking-improves-with-faster-flow",
                          "no comparable samples") and ok

    return 0 if ok else 1


def cmd_plot_data(args) -> int:
    run_dir = Path(args.run_dir)
    outdir = Path(args.out) if args.out else run_dir
    outdir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json") as f:
        cfg = from_dict(json.load(f))
    ctx = build_context(cfg)
    df = pd.read_csv(run_dir / "trajectory.csv")
    agents = sorted(df["agent"].unique())
    t = np.sort(df["t"].unique())
    steps = len(t)
    p = np.empty((steps, len(agents), 2))
    theta = np.empty((steps, len(agents)))
    for col, aid in enumerate(agents):
        sub = df[df["agent"] == aid].sort_values("t")
        p[:, col, 0] = sub["px"].to_numpy()
        p[:, col, 1] = sub["py"].to_numpy()
        theta[:, col] = sub["theta"].to_numpy()

    errors = formation_error_arrays(p, theta, ctx)
    frames = [
        pd.DataFrame({"t": t, "agent": i, "error_m": series}) for i, series in errors.items()
    ]
    form = (
        pd.concat(frames, ignore_index=True)
        if frames
        else pd.DataFrame(columns=["t", "agent", "error_m"])
    )
    form.to_csv(outdir / "formation_error.csv", index=False, float_format=FLOAT_FMT)
    obstacle_distance_arrays(p, t, cfg).to_csv(
        outdir / "obstacle_distance.csv", index=False, float_format=FLOAT_FMT
    )
    print(f"wrote {outdir / 'formation_error.csv'}")
    print(f"wrote {outdir / 'obstacle_distance.csv'}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cbfswarm",
        description="Distributed barrier-constrained navigation simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a scenario and write logs + metrics")
    p_sim.add_argument("scenario")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--tracking", action="store_true",
                       help="also compute the oracle tracking error (slower)")
    p_sim.set_defaults(func=cmd_simulate)

    p_orc = sub.add_parser("oracle", help="centralized solve at the initial state (JSON)")
    p_orc.add_argument("scenario")
    p_orc.add_argument("--eps", default=None,
                       help="regularization weight; 0 solves the coupled problem over inputs only")
    p_orc.set_defaults(func=cmd_oracle)

    p_ver = sub.add_parser("verify", help="run the invariant suite; nonzero exit on violation")
    p_ver.add_argument("scenario")
    p_ver.add_argument("--horizon-s", type=float, default=20.0,
                       help="cap on the verification horizon (default 20 s)")
    p_ver.add_argument("--samples", type=int, default=5,
                       help="number of sampled states for the equivalence check")
    p_ver.set_defaults(func=cmd_verify)

    p_plot = sub.add_parser("plot-data", help="emit tidy CSVs for the standard figures")
    p_plot.add_argument("run_dir")
    p_plot.add_argument("--out", default=None)
    p_plot.set_defaults(func=cmd_plot_data)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
