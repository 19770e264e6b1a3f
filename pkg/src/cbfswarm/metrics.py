"""Run metrics: formation errors, safety margins, arrivals, deadlocks.

Everything here is a pure function of a trajectory log and its scenario,
so recomputation always reproduces the same report. The optional
tracking pass re-solves the per-agent QPs at subsampled logged states
and compares against the centralized regularized oracle.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .dynamics import rotation
from .qpsolve import assemble_local_qp, solve_centralized_regularized, solve_qp
from .scenario import ScenarioConfig, TrajectoryLog
from .team import TeamContext, build_context

DEADLOCK_SPEED = 1e-3
DEADLOCK_HOLD_S = 5.0


@dataclass
class MetricsReport:
    """Summary statistics of one run."""

    formation_error_max: dict[int, float]
    formation_error_final: dict[int, float]
    min_obstacle_margin: dict[int, float]
    min_pair_margin: float
    waypoints_reached: list[tuple[int, float]]
    all_waypoints_reached: bool
    deadlock_intervals: list[tuple[float, float]]
    infeasible_steps: int
    lambda_min: float
    tracking_sup_error: float | None = None
    tracking_sample_times: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["formation_error_max"] = {str(k): v for k, v in self.formation_error_max.items()}
        d["formation_error_final"] = {str(k): v for k, v in self.formation_error_final.items()}
        d["min_obstacle_margin"] = {str(k): v for k, v in self.min_obstacle_margin.items()}
        d["waypoints_reached"] = [[k, t] for k, t in self.waypoints_reached]
        d["deadlock_intervals"] = [[a, b] for a, b in self.deadlock_intervals]
        return d


def formation_error_arrays(p: np.ndarray, theta: np.ndarray, ctx: TeamContext) -> dict[int, np.ndarray]:
    """Per-follower distance to its formation target, from pose arrays
    shaped (steps, N, 2) and (steps, N)."""
    cfg = ctx.cfg
    errors: dict[int, np.ndarray] = {}
    steps = p.shape[0]
    leader_theta = theta[:, ctx.leader_idx]
    for i, parents in cfg.formation.parents.items():
        cols = [ctx.agent_index(pj) for pj in parents]
        base = p[:, cols, :].mean(axis=1)
        offset = np.asarray(cfg.formation.offsets[i], dtype=float)
        if cfg.formation.frame == "leader-heading":
            c, s = np.cos(leader_theta), np.sin(leader_theta)
            off = np.stack(
                [c * offset[0] - s * offset[1], s * offset[0] + c * offset[1]], axis=-1
            )
        else:
            off = np.broadcast_to(offset, (steps, 2))
        target = base + off
        diff = p[:, ctx.agent_index(i), :] - target
        errors[i] = np.hypot(diff[:, 0], diff[:, 1])
    return errors


def formation_error_series(log: TrajectoryLog, ctx: TeamContext) -> dict[int, np.ndarray]:
    """Per-follower distance to its formation target at every logged step."""
    return formation_error_arrays(log.p, log.theta, ctx)


def obstacle_distance_arrays(p: np.ndarray, t: np.ndarray, cfg: ScenarioConfig) -> pd.DataFrame:
    """Tidy per-(agent, obstacle) clearance series from a (steps, N, 2) array.

    Circles get the Euclidean distance from the off-axis point to the
    surface; ellipses have no closed-form distance, so their rows carry
    the barrier value instead (labelled in the measure column).
    """
    records = []
    agent_cols = {a.id: idx for idx, a in enumerate(cfg.agents)}
    for a in cfg.agents:
        for ob in cfg.obstacle_assignments.get(a.id, ()):
            spec = cfg.obstacles[ob]
            pa = p[:, agent_cols[a.id], :]
            d = pa - np.asarray(spec.center)
            if spec.kind == "circle":
                vals = np.hypot(d[:, 0], d[:, 1]) - spec.radius
                measure = "surface_distance_m"
            else:
                ax, ay = spec.semi_axes
                vals = (d[:, 0] / ax) ** 2 + (d[:, 1] / ay) ** 2 - 1.0
                measure = "barrier_value"
            records.append(
                pd.DataFrame(
                    {"t": t, "agent": a.id, "obstacle": ob, "measure": measure, "value": vals}
                )
            )
    if not records:
        return pd.DataFrame(columns=["t", "agent", "obstacle", "measure", "value"])
    return pd.concat(records, ignore_index=True)


def obstacle_distance_series(log: TrajectoryLog, cfg: ScenarioConfig) -> pd.DataFrame:
    return obstacle_distance_arrays(log.p, log.t, cfg)


def waypoint_arrivals(log: TrajectoryLog, ctx: TeamContext) -> list[tuple[int, float]]:
    """(waypoint index, arrival time) for every waypoint the leader reached."""
    arrivals = [(switch_to - 1, t) for t, switch_to in log.waypoint_events]
    last_idx = len(ctx.cfg.waypoints) - 1
    on_last = log.waypoint_index == last_idx
    if on_last.any():
        target = np.asarray(ctx.cfg.waypoints[last_idx])
        p_leader = log.p[:, ctx.leader_idx, :]
        close = np.hypot(p_leader[:, 0] - target[0], p_leader[:, 1] - target[1])
        hit = np.flatnonzero(on_last & (close < ctx.gains.goal_tol))
        if hit.size:
            arrivals.append((last_idx, float(log.t[hit[0]])))
    return arrivals


def deadlock_intervals(log: TrajectoryLog, ctx: TeamContext) -> list[tuple[float, float]]:
    """Windows where the whole team is nearly stationary while the leader
    is still far from its waypoint (held for DEADLOCK_HOLD_S)."""
    dt = log.meta["dt_s"]
    speed = np.linalg.norm(log.u.reshape(log.u.shape[0], -1), axis=1)
    wp = np.asarray([ctx.cfg.waypoints[k] for k in log.waypoint_index])
    p_leader = log.p[:, ctx.leader_idx, :]
    wp_err = np.hypot(p_leader[:, 0] - wp[:, 0], p_leader[:, 1] - wp[:, 1])
    stuck = (speed < DEADLOCK_SPEED) & (wp_err > ctx.gains.goal_tol)
    hold = max(1, int(round(DEADLOCK_HOLD_S / dt)))
    intervals = []
    run_start = None
    for idx, flag in enumerate(stuck):
        if flag and run_start is None:
            run_start = idx
        elif not flag and run_start is not None:
            if idx - run_start >= hold:
                intervals.append((float(log.t[run_start]), float(log.t[idx - 1])))
            run_start = None
    if run_start is not None and len(stuck) - run_start >= hold:
        intervals.append((float(log.t[run_start]), float(log.t[-1])))
    return intervals


def tracking_errors(log: TrajectoryLog, ctx: TeamContext, sample_every_s: float = 1.0):
    """Distance between the applied distributed inputs and the centralized
    regularized optimizer along the logged trajectory.

    Evaluated at the subsampled flow records that fall on the requested
    grid, re-solving each agent's QP at the logged (poses, z) and the
    oracle at the logged poses.
    """
    from .dynamics import AgentState

    errors = []
    times = []
    eps = log.meta["eps"]
    dt = log.meta["dt_s"]
    for rec, t_rec in enumerate(log.flow_t):
        if abs(t_rec / sample_every_s - round(t_rec / sample_every_s)) > 1e-9:
            continue
        step = int(round(t_rec / dt))
        states = [
            AgentState(
                s=(log.s[step, idx, 0], log.s[step, idx, 1]),
                theta=log.theta[step, idx],
                id=ctx.agent_ids[idx],
            )
            for idx in range(ctx.n_agents)
        ]
        waypoint = ctx.cfg.waypoints[int(log.waypoint_index[step])]
        z = log.flow_z[rec]
        u_bar = np.empty((ctx.n_agents, 2))
        feasible = True
        for idx, aid in enumerate(ctx.agent_ids):
            qp = assemble_local_qp(aid, states, z, ctx.index, ctx, waypoint)
            sol = solve_qp(qp)
            if not sol.optimal:
                feasible = False
                break
            u_bar[idx] = sol.u
        if not feasible:
            continue
        oracle = solve_centralized_regularized(states, eps, ctx, waypoint)
        if not oracle.optimal:
            continue
        errors.append(float(np.linalg.norm((u_bar - oracle.u).reshape(-1))))
        times.append(float(t_rec))
    return np.asarray(errors), times


def compute_metrics(
    log: TrajectoryLog,
    cfg: ScenarioConfig,
    ctx: TeamContext | None = None,
    tracking_oracle: bool = False,
    tracking_sample_every_s: float = 1.0,
) -> MetricsReport:
    """Assemble the metrics report for one run."""
    if ctx is None:
        ctx = build_context(cfg)
    form = formation_error_series(log, ctx)
    formation_max = {i: float(e.max()) for i, e in form.items()}
    formation_final = {i: float(e[-1]) for i, e in form.items()}

    min_obstacle: dict[int, float] = {}
    min_pair = np.inf
    for k, sg in enumerate(ctx.subgraphs):
        series_min = float(log.margins[:, k].min())
        if sg.is_pair:
            min_pair = min(min_pair, series_min)
        else:
            agent = sg.kind[1]
            min_obstacle[agent] = min(min_obstacle.get(agent, np.inf), series_min)

    arrivals = waypoint_arrivals(log, ctx)
    reached = {k for k, _ in arrivals}
    all_reached = reached == set(range(len(cfg.waypoints)))

    tracking_sup = None
    times: list[float] = []
    if tracking_oracle:
        errs, times = tracking_errors(log, ctx, tracking_sample_every_s)
        tracking_sup = float(errs.max()) if errs.size else None

    return MetricsReport(
        formation_error_max=formation_max,
        formation_error_final=formation_final,
        min_obstacle_margin=min_obstacle,
        min_pair_margin=float(min_pair) if np.isfinite(min_pair) else np.nan,
        waypoints_reached=arrivals,
        all_waypoints_reached=all_reached,
        deadlock_intervals=deadlock_intervals(log, ctx),
        infeasible_steps=len(log.infeasible_events),
        lambda_min=log.lambda_min,
        tracking_sup_error=tracking_sup,
        tracking_sample_times=times,
    )
