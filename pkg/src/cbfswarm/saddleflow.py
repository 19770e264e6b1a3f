"""Projected saddle-point flow for the mismatch variables, interconnected
with the unicycle plants.

Every control round is synchronous: each agent solves its local QP at the
previous round's poses and mismatch values, the plants advance one RK4
step with those inputs held, and the auxiliary variables (gamma, z,
lambda) advance by forward-Euler substeps of the fast flow

    tau * gamma_i' = -grad f_i(gamma_i) - sum_k lambda_ik * a_ik
    tau * z_ik'    = -eps * z_ik - sum_j (lambda_ik - lambda_jk)
    tau * lambda_ik' = [ g_ik(gamma_i) + sum_j (z_ik - z_jk) ]^+_(lambda_ik)

with the multiplier flow projected so lambda stays nonnegative. Safety
of the applied inputs does not depend on the flow having converged: each
local QP enforces its shifted rows exactly, and the shifts telescope to
zero over every constraint subgraph.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import AgentState, rk4_step_arrays
from .formation import WaypointPlan, advance_waypoint
from .qpsolve import _solve_2var, prepare_weight
from .scenario import FlowParams, ScenarioConfig, TrajectoryLog, config_hash
from .team import TeamContext, build_context, stack_states

THREADS_ENV = "CBFSWARM_THREADS"


@dataclass(frozen=True)
class FlowState:
    """Fast-flow variables: auxiliary inputs gamma, mismatch z, multipliers lam."""

    gamma: np.ndarray
    z: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        if (self.lam < 0.0).any():
            raise ValueError("multiplier vector must be componentwise nonnegative")

    def copy(self) -> "FlowState":
        return FlowState(self.gamma.copy(), self.z.copy(), self.lam.copy())


@dataclass(frozen=True)
class WorldState:
    """Composite simulation state: plants, fast flow, waypoint plan, time."""

    agents: tuple[AgentState, ...]
    flow: FlowState
    plan: WaypointPlan
    t: float
    applied_u: np.ndarray | None = None
    infeasible: tuple[int, ...] = ()


def projected_rate(raw, lam):
    """Componentwise projection keeping the multiplier flow in the orthant:
    the raw rate where lam > 0, its positive part where lam = 0."""
    return np.where(lam > 0.0, raw, np.maximum(raw, 0.0))


def initial_world(ctx: TeamContext, flow: FlowState) -> WorldState:
    s, theta = ctx.initial_arrays()
    agents = tuple(
        AgentState(s=(s[i, 0], s[i, 1]), theta=theta[i], id=ctx.agent_ids[i])
        for i in range(ctx.n_agents)
    )
    plan = WaypointPlan(waypoints=ctx.cfg.waypoints, current_index=0)
    return WorldState(agents=agents, flow=flow, plan=plan, t=0.0,
                      applied_u=np.zeros((ctx.n_agents, 2)))


def _rhs_arrays(gamma, z, lam, A_slot, b_slot, unom, ctx, tau):
    """The three flow right-hand sides, already divided by tau."""
    g_vals = np.einsum("si,si->s", A_slot, gamma[ctx.slot_agent_index]) + b_slot
    Lz = ctx.index.laplacian
    resid = g_vals + Lz @ z
    force = np.zeros_like(gamma)
    np.add.at(force, ctx.slot_agent_index, A_slot * lam[:, None])
    dgamma = -((gamma - unom) @ ctx.H + force) / tau
    dz = (-ctx.cfg.flow.eps * z - Lz @ lam) / tau
    dlam = projected_rate(resid, lam) / tau
    return dgamma, dz, dlam


def fast_flow_rhs(flow: FlowState, agents, ctx: TeamContext, waypoint=None):
    """Evaluate the fast-flow right-hand sides at frozen poses.

    Returns (dgamma, dz, dlambda) divided by tau. Each agent's blocks read
    only its own and its neighbors' slots.
    """
    if waypoint is None:
        waypoint = ctx.cfg.waypoints[0]
    s, theta = stack_states(agents)
    A_slot, b_slot, _ = ctx.slot_rows(s, theta)
    unom = ctx.nominal_inputs(s, theta, waypoint)
    return _rhs_arrays(flow.gamma, flow.z, flow.lam, A_slot, b_slot, unom, ctx,
                       ctx.cfg.flow.tau)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _solve_team_qps(ctx, A_slot, b_shift, unom, u_prev, executor=None):
    """Solve every agent's two-variable QP; hold the previous input on
    infeasibility. Returns (u, infeasible agent ids)."""
    hf = ctx_h_fields(ctx)
    u = np.empty((ctx.n_agents, 2))
    infeasible = []

    def solve_one(ai):
        lo, hi = ctx.slot_ranges[ai]
        return _solve_2var(
            hf,
            float(unom[ai, 0]),
            float(unom[ai, 1]),
            A_slot[lo:hi, 0].tolist(),
            A_slot[lo:hi, 1].tolist(),
            b_shift[lo:hi].tolist(),
        )

    if executor is None:
        results = [solve_one(ai) for ai in range(ctx.n_agents)]
    else:
        results = list(executor.map(solve_one, range(ctx.n_agents)))
    for ai, (status, x1, x2, _, _) in enumerate(results):
        if status == "optimal":
            u[ai, 0], u[ai, 1] = x1, x2
        else:
            u[ai] = u_prev[ai]
            infeasible.append(ctx.agent_ids[ai])
    return u, tuple(infeasible)


def ctx_h_fields(ctx: TeamContext):
    if not hasattr(ctx, "_h_fields"):
        ctx._h_fields = prepare_weight(ctx.H)
    return ctx._h_fields


def _advance_flow(gamma, z, lam, A_slot, b_slot, unom, ctx, params: FlowParams):
    """Forward-Euler substeps of the fast flow over one plant step, with the
    multipliers projected back onto the orthant after each substep."""
    dt_f = params.dt_flow if params.substeps else 0.0
    for _ in range(params.substeps):
        dgamma, dz, dlam = _rhs_arrays(gamma, z, lam, A_slot, b_slot, unom, ctx, params.tau)
        gamma = gamma + dt_f * dgamma
        z = z + dt_f * dz
        lam = np.maximum(lam + dt_f * dlam, 0.0)
    return gamma, z, lam


def _step_arrays(s, theta, gamma, z, lam, plan, u_prev, ctx, params, executor=None,
                 rows=None):
    """One synchronous round on raw arrays.

    Everything an agent reads (poses, z, lam) is from the previous round,
    so per-agent work is order-independent. Returns the advanced arrays
    plus the applied inputs, the margins measured at the pre-step poses,
    and the ids of agents whose QP was infeasible this round.
    """
    if rows is None:
        rows = ctx.slot_rows(s, theta)
    A_slot, b_slot, margins = rows
    unom = ctx.nominal_inputs(s, theta, plan.current)
    b_shift = b_slot + ctx.index.laplacian @ z
    u, infeasible = _solve_team_qps(ctx, A_slot, b_shift, unom, u_prev, executor)

    s_next, theta_next = rk4_step_arrays(s, theta, u[:, 0], u[:, 1], params.dt)
    gamma, z, lam = _advance_flow(gamma, z, lam, A_slot, b_slot, unom, ctx, params)

    p_leader = ctx.points(s_next[None, ctx.leader_idx], theta_next[None, ctx.leader_idx])[0]
    plan = advance_waypoint(plan, p_leader, ctx.gains.goal_tol)
    return s_next, theta_next, gamma, z, lam, plan, u, margins, infeasible


def flow_step(world: WorldState, params: FlowParams, ctx: TeamContext) -> WorldState:
    """Advance the full interconnection by one synchronous round."""
    s, theta = stack_states(world.agents)
    u_prev = world.applied_u if world.applied_u is not None else np.zeros((ctx.n_agents, 2))
    s2, theta2, gamma, z, lam, plan, u, _, infeasible = _step_arrays(
        s, theta, world.flow.gamma, world.flow.z, world.flow.lam, world.plan, u_prev,
        ctx, params,
    )
    agents = tuple(
        replace(world.agents[i], s=(s2[i, 0], s2[i, 1]), theta=float(theta2[i]))
        for i in range(ctx.n_agents)
    )
    return WorldState(
        agents=agents,
        flow=FlowState(gamma, z, lam),
        plan=plan,
        t=world.t + params.dt,
        applied_u=u,
        infeasible=infeasible,
    )


def warm_start(agents, params: FlowParams, ctx: TeamContext, waypoint=None) -> FlowState:
    """Run the fast flow at frozen poses until its residual settles.

    Starts from gamma = nominal inputs, z = 0, lambda = 0 and iterates the
    Euler substep until the max norm of the unscaled right-hand sides
    (tau times the rates) drops below warm_tol. The result approximates
    the regularized centralized solution at the frozen poses.
    """
    if waypoint is None:
        waypoint = ctx.cfg.waypoints[0]
    s, theta = stack_states(agents)
    A_slot, b_slot, _ = ctx.slot_rows(s, theta)
    unom = ctx.nominal_inputs(s, theta, waypoint)
    gamma = unom.copy()
    q = ctx.index.q
    z = np.zeros(q)
    lam = np.zeros(q)
    dt_f = params.dt_flow if params.dt > 0 else params.tau / 10.0
    tau = params.tau
    eps = ctx.cfg.flow.eps
    Lz = ctx.index.laplacian
    slot_agent = ctx.slot_agent_index
    H = ctx.H
    for it in range(params.warm_budget):
        g_vals = np.einsum("si,si->s", A_slot, gamma[slot_agent]) + b_slot
        resid = g_vals + Lz @ z
        force = np.zeros_like(gamma)
        np.add.at(force, slot_agent, A_slot * lam[:, None])
        r_gamma = -((gamma - unom) @ H + force)
        r_z = -eps * z - Lz @ lam
        r_lam = projected_rate(resid, lam)
        res = max(
            float(np.abs(r_gamma).max(initial=0.0)),
            float(np.abs(r_z).max(initial=0.0)),
            float(np.abs(r_lam).max(initial=0.0)),
        )
        if res < params.warm_tol:
            return FlowState(gamma, z, np.maximum(lam, 0.0))
        gamma = gamma + (dt_f / tau) * r_gamma
        z = z + (dt_f / tau) * r_z
        lam = np.maximum(lam + (dt_f / tau) * r_lam, 0.0)
    raise RuntimeError(
        f"warm start did not settle within {params.warm_budget} iterations; "
        f"residual {res:g} vs tolerance {params.warm_tol:g}"
    )


def simulate(cfg: ScenarioConfig, ctx: TeamContext | None = None) -> TrajectoryLog:
    """Warm-start the flow, then run the full interconnection for the horizon.

    Logs poses, off-axis points, applied inputs, per-constraint margins,
    waypoint switches, infeasibility holds, and subsampled flow variables.
    Identical configurations produce bit-identical logs.
    """
    if ctx is None:
        ctx = build_context(cfg)
    params = cfg.flow
    n = ctx.n_agents
    s, theta = ctx.initial_arrays()
    plan = WaypointPlan(waypoints=cfg.waypoints, current_index=0)
    agents0 = tuple(
        AgentState(s=(s[i, 0], s[i, 1]), theta=theta[i], id=ctx.agent_ids[i]) for i in range(n)
    )
    flow = warm_start(agents0, params, ctx, waypoint=plan.current)
    gamma, z, lam = flow.gamma.copy(), flow.z.copy(), flow.lam.copy()

    steps = int(round(cfg.horizon / params.dt))
    flow_every = max(1, int(round(cfg.flow_log_every / params.dt)))
    n_flow_records = steps // flow_every + 1

    t_log = np.empty(steps + 1)
    s_log = np.empty((steps + 1, n, 2))
    theta_log = np.empty((steps + 1, n))
    p_log = np.empty((steps + 1, n, 2))
    u_log = np.empty((steps + 1, n, 2))
    margins_log = np.empty((steps + 1, ctx.n_constraints))
    wp_log = np.empty(steps + 1, dtype=np.int64)
    flow_t = np.empty(n_flow_records)
    flow_gamma = np.empty((n_flow_records, n, 2))
    flow_z = np.empty((n_flow_records, ctx.index.q))
    flow_lambda = np.empty((n_flow_records, ctx.index.q))
    infeasible_events: list[tuple[int, int]] = []
    waypoint_events: list[tuple[float, int]] = []
    lambda_min = float(lam.min(initial=0.0))

    executor = None
    n_threads = _threads()
    if n_threads > 1:
        executor = ThreadPoolExecutor(max_workers=n_threads)

    u_prev = np.zeros((n, 2))
    flow_rec = 0
    try:
        for step in range(steps):
            t = step * params.dt
            rows = ctx.slot_rows(s, theta)
            t_log[step] = t
            s_log[step] = s
            theta_log[step] = theta
            p_log[step] = ctx.points(s, theta)
            margins_log[step] = rows[2]
            wp_log[step] = plan.current_index
            if step % flow_every == 0:
                flow_t[flow_rec] = t
                flow_gamma[flow_rec] = gamma
                flow_z[flow_rec] = z
                flow_lambda[flow_rec] = lam
                flow_rec += 1

            prev_index = plan.current_index
            s, theta, gamma, z, lam, plan, u, _, infeasible = _step_arrays(
                s, theta, gamma, z, lam, plan, u_prev, ctx, params, executor, rows=rows
            )
            u_log[step] = u
            u_prev = u
            lam_min_step = float(lam.min(initial=0.0))
            if lam_min_step < lambda_min:
                lambda_min = lam_min_step
            for aid in infeasible:
                infeasible_events.append((step, aid))
            if plan.current_index != prev_index:
                waypoint_events.append(((step + 1) * params.dt, plan.current_index))

        # closing record: state, margins, and the input the controller would apply
        t_log[steps] = steps * params.dt
        s_log[steps] = s
        theta_log[steps] = theta
        p_log[steps] = ctx.points(s, theta)
        wp_log[steps] = plan.current_index
        A_slot, b_slot, final_margins = ctx.slot_rows(s, theta)
        margins_log[steps] = final_margins
        unom = ctx.nominal_inputs(s, theta, plan.current)
        b_shift = b_slot + ctx.index.laplacian @ z
        u_final, _ = _solve_team_qps(ctx, A_slot, b_shift, unom, u_prev, executor)
        u_log[steps] = u_final
        if steps % flow_every == 0:
            flow_t[flow_rec] = steps * params.dt
            flow_gamma[flow_rec] = gamma
            flow_z[flow_rec] = z
            flow_lambda[flow_rec] = lam
            flow_rec += 1
    finally:
        if executor is not None:
            executor.shutdown()

    meta = {
        "name": cfg.name,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "version_note": "cbfswarm trajectory log",
        "tau_s": params.tau,
        "dt_s": params.dt,
        "eps": params.eps,
        "horizon_s": cfg.horizon,
        "n_agents": n,
        "agent_ids": list(ctx.agent_ids),
        "leader_id": cfg.leader_id,
        "constraint_members": [list(m) for m in ctx.constraint_members],
        "threads": n_threads,
    }
    return TrajectoryLog(
        meta=meta,
        constraint_desc=ctx.constraint_desc,
        t=t_log,
        s=s_log,
        theta=theta_log,
        p=p_log,
        u=u_log,
        margins=margins_log,
        waypoint_index=wp_log,
        infeasible_events=tuple(infeasible_events),
        waypoint_events=tuple(waypoint_events),
        lambda_min=lambda_min,
        flow_t=flow_t[:flow_rec],
        flow_gamma=flow_gamma[:flow_rec],
        flow_z=flow_z[:flow_rec],
        flow_lambda=flow_lambda[:flow_rec],
    )
