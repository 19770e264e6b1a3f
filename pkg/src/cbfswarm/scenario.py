"""Scenario configuration, validation, defaults, and the trajectory log.

Scenario files are JSON object trees with units spelled in the field
names (d_min_m, tau_s, ...). Parsing resolves the auto rules (2-nearest
communication edges, all-obstacles assignment), fills defaults, and
validates every positivity, graph, and safety invariant up front so the
simulation modules can assume well-formed inputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .barriers import ObstacleSpec, barrier_eval, pair_margin
from .dynamics import OffAxisParams, off_axis_points
from .formation import FormationSpec, NominalGains, k_neighborhoods
from .netgraph import CommGraph, build_subgraphs, two_nearest_edges

FLOAT_FMT = "%.17g"

DEFAULT_GAINS = {"k_r": 0.5, "k_a": 1.0, "h_gain": 0.6, "goal_tol_m": 0.3,
                 "omega_heading_error": False}
DEFAULT_SAFETY = {"l_m": 0.2, "alpha_c": 2.0, "alpha_obstacle": 2.0, "d_min_m": 1.0}
DEFAULT_FLOW = {"tau_s": 0.1, "eps": 1e-3, "dt_s": 1e-3, "warm_tol": 1e-6,
                "substeps": 1, "warm_budget": 10_000_000}
DEFAULT_ETA_CIRCLE = 1.5
DEFAULT_INPUT_WEIGHTS = ((5.0, 0.0), (0.0, 1.0))


class ScenarioError(ValueError):
    """A scenario file violates a structural or safety invariant."""


@dataclass(frozen=True)
class AgentInit:
    """Initial pose and body radius of one agent."""

    id: int
    start: tuple[float, float]
    theta: float
    radius: float = 0.3


@dataclass(frozen=True)
class FlowParams:
    """Timescale, regularization, and integration parameters of the fast flow.

    The flow advances by substeps forward-Euler steps of dt/substeps per
    plant step; the effective flow step must resolve the fast timescale
    (dt/substeps <= tau/10).
    """

    tau: float
    eps: float
    dt: float
    warm_tol: float = 1e-6
    substeps: int = 1
    warm_budget: int = 10_000_000

    def __post_init__(self):
        if not self.tau > 0.0:
            raise ScenarioError("flow.tau_s must be positive")
        if not self.eps > 0.0:
            raise ScenarioError("flow.eps must be positive")
        if self.dt < 0.0:
            raise ScenarioError("flow.dt_s must be nonnegative")
        if self.substeps < 1:
            raise ScenarioError("flow.substeps must be at least 1")
        if self.dt / self.substeps > self.tau / 10.0 * (1.0 + 1e-12):
            raise ScenarioError(
                f"flow step {self.dt}/{self.substeps} does not resolve tau={self.tau}; "
                "need dt/substeps <= tau/10"
            )
        if not self.warm_tol > 0.0:
            raise ScenarioError("flow.warm_tol must be positive")

    @property
    def dt_flow(self) -> float:
        return self.dt / self.substeps


@dataclass(frozen=True)
class ScenarioConfig:
    """Fully resolved and validated scenario."""

    name: str
    seed: int
    agents: tuple[AgentInit, ...]
    leader_id: int
    comm_edges: tuple[tuple[int, int], ...]
    pair_constraints: tuple[tuple[int, int], ...]
    obstacles: tuple[ObstacleSpec, ...]
    obstacle_assignments: dict[int, tuple[int, ...]]
    formation: FormationSpec
    waypoints: tuple[tuple[float, float], ...]
    gains: NominalGains
    heading_error_term: bool
    offaxis: OffAxisParams
    alpha_c: float
    d_min: float
    flow: FlowParams
    input_weights: tuple[tuple[float, float], tuple[float, float]]
    horizon: float
    flow_log_every: float
    allow_unsafe_start: bool = False

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def agent(self, agent_id: int) -> AgentInit:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)


def config_hash(cfg: ScenarioConfig) -> str:
    payload = json.dumps(to_dict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _require(data: dict, key: str, where: str):
    if key not in data:
        raise ScenarioError(f"missing field {key!r} in {where}")
    return data[key]


def _parse_obstacle(idx: int, data: dict, default_alpha: float) -> ObstacleSpec:
    kind = _require(data, "kind", f"obstacles[{idx}]")
    center = tuple(_require(data, "center_m", f"obstacles[{idx}]"))
    alpha = float(data.get("alpha", default_alpha))
    eta = data.get("eta")
    try:
        if kind == "circle":
            radius = float(_require(data, "radius_m", f"obstacles[{idx}]"))
            if eta is None:
                eta = DEFAULT_ETA_CIRCLE
            return ObstacleSpec(kind="circle", center=center, radius=radius,
                                eta=float(eta), alpha=alpha)
        if kind == "ellipse":
            axes = tuple(_require(data, "semi_axes_m", f"obstacles[{idx}]"))
            if eta is None:
                raise ScenarioError(
                    f"obstacles[{idx}]: eta is required for ellipse obstacles "
                    "(no closed-form body margin exists)"
                )
            return ObstacleSpec(kind="ellipse", center=center, semi_axes=axes,
                                eta=float(eta), alpha=alpha)
    except ValueError as exc:
        raise ScenarioError(f"obstacles[{idx}]: {exc}") from exc
    raise ScenarioError(f"obstacles[{idx}]: unknown kind {kind!r}")


def from_dict(data: dict, name: str = "scenario") -> ScenarioConfig:
    """Build and validate a ScenarioConfig from a JSON object tree."""
    name = str(data.get("name", name))
    seed = int(data.get("seed", 0))

    agents_raw = _require(data, "agents", "scenario")
    if not agents_raw:
        raise ScenarioError("agents list must be non-empty")
    agents = []
    for idx, a in enumerate(agents_raw):
        agents.append(
            AgentInit(
                id=int(_require(a, "id", f"agents[{idx}]")),
                start=tuple(float(v) for v in _require(a, "start_xy_m", f"agents[{idx}]")),
                theta=float(a.get("theta_rad", 0.0)),
                radius=float(a.get("radius_m", 0.3)),
            )
        )
    agents = tuple(sorted(agents, key=lambda a: a.id))
    ids = [a.id for a in agents]
    n = len(ids)
    if ids != list(range(1, n + 1)):
        raise ScenarioError(f"agent ids must be exactly 1..{n}, got {ids}")
    for a in agents:
        if a.radius < 0.0:
            raise ScenarioError(f"agents[{a.id}].radius_m must be nonnegative")

    leader = int(data.get("leader_id", 1))
    if leader not in ids:
        raise ScenarioError(f"leader_id {leader} is not an agent id")

    safety = {**DEFAULT_SAFETY, **data.get("safety", {})}
    try:
        offaxis = OffAxisParams(l=float(safety["l_m"]))
    except ValueError as exc:
        raise ScenarioError(f"safety.l_m: {exc}") from exc
    alpha_c = float(safety["alpha_c"])
    d_min = float(safety["d_min_m"])
    if not alpha_c > 0.0:
        raise ScenarioError("safety.alpha_c must be positive")
    if not d_min > 0.0:
        raise ScenarioError("safety.d_min_m must be positive")

    positions = {a.id: a.start for a in agents}
    edges_raw = data.get("comm_edges", "auto-2-nearest")
    if edges_raw == "auto-2-nearest":
        edges = two_nearest_edges(positions)
    else:
        edges = tuple((int(i), int(j)) for i, j in edges_raw)
    try:
        graph = CommGraph(n=n, edges=edges)
    except ValueError as exc:
        raise ScenarioError(f"comm_edges: {exc}") from exc

    pairs_raw = data.get("pair_constraints", "auto")
    if pairs_raw == "auto":
        pairs = graph.edges
    else:
        pairs = tuple(sorted({(min(int(i), int(j)), max(int(i), int(j))) for i, j in pairs_raw}))
    by_id = {a.id: a for a in agents}
    for i, j in pairs:
        if not graph.has_edge(i, j):
            raise ScenarioError(f"pair_constraints: ({i},{j}) is not a communication edge")
        needed = by_id[i].radius + by_id[j].radius + 2.0 * offaxis.l
        if d_min < needed - 1e-12:
            raise ScenarioError(
                f"safety.d_min_m={d_min} is below r_{i}+r_{j}+2*l={needed:g} for pair ({i},{j})"
            )

    alpha_k = float(safety["alpha_obstacle"])
    obstacles = tuple(
        _parse_obstacle(idx, o, alpha_k) for idx, o in enumerate(data.get("obstacles", []))
    )

    assign_raw = data.get("obstacle_assignments", "all")
    if assign_raw == "all":
        assignments = {a.id: tuple(range(len(obstacles))) for a in agents}
    else:
        assignments = {}
        for key, obs_ids in assign_raw.items():
            agent_id = int(key)
            if agent_id not in ids:
                raise ScenarioError(f"obstacle_assignments references unknown agent {agent_id}")
            for ob in obs_ids:
                if not (0 <= int(ob) < len(obstacles)):
                    raise ScenarioError(
                        f"obstacle_assignments[{agent_id}] references unknown obstacle {ob}"
                    )
            assignments[agent_id] = tuple(sorted(int(ob) for ob in obs_ids))
        for a in agents:
            assignments.setdefault(a.id, ())

    form_raw = data.get("formation", {"frame": "leader-heading", "followers": {}})
    followers_raw = form_raw.get("followers", {})
    parents = {}
    offsets = {}
    for key, entry in followers_raw.items():
        i = int(key)
        parents[i] = tuple(int(p) for p in _require(entry, "parents", f"formation.followers[{i}]"))
        offsets[i] = tuple(float(v) for v in _require(entry, "offset_m", f"formation.followers[{i}]"))
    try:
        formation = FormationSpec(
            parents=parents, offsets=offsets, frame=form_raw.get("frame", "leader-heading")
        )
    except ValueError as exc:
        raise ScenarioError(f"formation: {exc}") from exc
    expected_followers = set(ids) - {leader}
    if set(parents) != expected_followers:
        raise ScenarioError(
            f"formation.followers must cover exactly the non-leader agents "
            f"{sorted(expected_followers)}, got {sorted(parents)}"
        )
    depths = k_neighborhoods(graph, leader)
    adj = graph.adjacency()
    for i, par in parents.items():
        for pj in par:
            if pj != i and pj not in adj[i]:
                raise ScenarioError(
                    f"formation.followers[{i}]: parent {pj} is not a communication neighbor"
                )
            if depths[pj] != depths[i] - 1:
                raise ScenarioError(
                    f"formation.followers[{i}]: parent {pj} must be one hop closer to the "
                    f"leader (depth {depths[i] - 1}), has depth {depths[pj]}"
                )

    waypoints_raw = _require(data, "waypoints_m", "scenario")
    if not waypoints_raw:
        raise ScenarioError("waypoints_m must be non-empty")
    waypoints = tuple((float(w[0]), float(w[1])) for w in waypoints_raw)

    gains_raw = {**DEFAULT_GAINS, **data.get("gains", {})}
    try:
        gains = NominalGains(
            k_r=float(gains_raw["k_r"]),
            k_a=float(gains_raw["k_a"]),
            h_gain=float(gains_raw["h_gain"]),
            goal_tol=float(gains_raw["goal_tol_m"]),
        )
    except ValueError as exc:
        raise ScenarioError(f"gains: {exc}") from exc
    heading_error_term = bool(gains_raw["omega_heading_error"])

    flow_raw = {**DEFAULT_FLOW, **data.get("flow", {})}
    flow = FlowParams(
        tau=float(flow_raw["tau_s"]),
        eps=float(flow_raw["eps"]),
        dt=float(flow_raw["dt_s"]),
        warm_tol=float(flow_raw["warm_tol"]),
        substeps=int(flow_raw["substeps"]),
        warm_budget=int(flow_raw["warm_budget"]),
    )
    if not flow.dt > 0.0:
        raise ScenarioError("flow.dt_s must be positive in a scenario")

    weights_raw = data.get("input_weights", DEFAULT_INPUT_WEIGHTS)
    weights = tuple(tuple(float(v) for v in row) for row in weights_raw)
    if len(weights) != 2 or any(len(r) != 2 for r in weights):
        raise ScenarioError("input_weights must be a 2x2 matrix")
    gamma = np.asarray(weights)
    if abs(np.linalg.det(gamma)) < 1e-12:
        raise ScenarioError("input_weights must be nonsingular")

    horizon = float(data.get("horizon_s", 60.0))
    if not horizon > 0.0:
        raise ScenarioError("horizon_s must be positive")
    flow_log_every = float(data.get("flow_log_every_s", 0.1))
    if flow_log_every < flow.dt:
        raise ScenarioError("flow_log_every_s must be at least flow.dt_s")

    cfg = ScenarioConfig(
        name=name,
        seed=seed,
        agents=agents,
        leader_id=leader,
        comm_edges=graph.edges,
        pair_constraints=pairs,
        obstacles=obstacles,
        obstacle_assignments=assignments,
        formation=formation,
        waypoints=waypoints,
        gains=gains,
        heading_error_term=heading_error_term,
        offaxis=offaxis,
        alpha_c=alpha_c,
        d_min=d_min,
        flow=flow,
        input_weights=weights,
        horizon=horizon,
        flow_log_every=flow_log_every,
        allow_unsafe_start=bool(data.get("allow_unsafe_start", False)),
    )
    _validate_initial_safety(cfg)
    return cfg


def _validate_initial_safety(cfg: ScenarioConfig):
    """Reject scenarios whose initial state is not strictly safe."""
    # exercises build_subgraphs validation as well
    build_subgraphs(
        CommGraph(n=cfg.n_agents, edges=cfg.comm_edges),
        cfg.pair_constraints,
        cfg.obstacle_assignments,
    )
    if cfg.allow_unsafe_start:
        return
    pts = {
        a.id: off_axis_points(np.asarray(a.start), a.theta, cfg.offaxis.l) for a in cfg.agents
    }
    for a in cfg.agents:
        for ob in cfg.obstacle_assignments.get(a.id, ()):
            h, _ = barrier_eval(cfg.obstacles[ob], pts[a.id])
            if h - cfg.obstacles[ob].eta <= 0.0:
                raise ScenarioError(
                    f"initial state unsafe: agent {a.id} starts with barrier margin "
                    f"{h - cfg.obstacles[ob].eta:g} <= 0 for obstacle {ob}"
                )
    for i, j in cfg.pair_constraints:
        d = pair_margin(pts[i], pts[j], cfg.d_min)
        if d <= 0.0:
            raise ScenarioError(
                f"initial state unsafe: pair ({i},{j}) starts with distance margin {d:g} <= 0"
            )


def parse_scenario(path) -> ScenarioConfig:
    """Load, resolve, and validate a scenario file."""
    path = Path(path)
    with open(path) as f:
        data = json.load(f)
    return from_dict(data, name=path.stem)


def to_dict(cfg: ScenarioConfig) -> dict:
    """JSON-compatible representation; from_dict(to_dict(cfg)) == cfg."""
    obstacles = []
    for o in cfg.obstacles:
        entry = {"kind": o.kind, "center_m": list(o.center), "alpha": o.alpha, "eta": o.eta}
        if o.kind == "circle":
            entry["radius_m"] = o.radius
        else:
            entry["semi_axes_m"] = list(o.semi_axes)
        obstacles.append(entry)
    return {
        "name": cfg.name,
        "seed": cfg.seed,
        "agents": [
            {"id": a.id, "start_xy_m": list(a.start), "theta_rad": a.theta, "radius_m": a.radius}
            for a in cfg.agents
        ],
        "leader_id": cfg.leader_id,
        "comm_edges": [list(e) for e in cfg.comm_edges],
        "pair_constraints": [list(e) for e in cfg.pair_constraints],
        "obstacles": obstacles,
        "obstacle_assignments": {
            str(i): list(obs) for i, obs in sorted(cfg.obstacle_assignments.items())
        },
        "formation": {
            "frame": cfg.formation.frame,
            "followers": {
                str(i): {
                    "parents": list(cfg.formation.parents[i]),
                    "offset_m": list(cfg.formation.offsets[i]),
                }
                for i in sorted(cfg.formation.parents)
            },
        },
        "waypoints_m": [list(w) for w in cfg.waypoints],
        "gains": {
            "k_r": cfg.gains.k_r,
            "k_a": cfg.gains.k_a,
            "h_gain": cfg.gains.h_gain,
            "goal_tol_m": cfg.gains.goal_tol,
            "omega_heading_error": cfg.heading_error_term,
        },
        "safety": {
            "l_m": cfg.offaxis.l,
            "alpha_c": cfg.alpha_c,
            "alpha_obstacle": DEFAULT_SAFETY["alpha_obstacle"],
            "d_min_m": cfg.d_min,
        },
        "flow": {
            "tau_s": cfg.flow.tau,
            "eps": cfg.flow.eps,
            "dt_s": cfg.flow.dt,
            "warm_tol": cfg.flow.warm_tol,
            "substeps": cfg.flow.substeps,
            "warm_budget": cfg.flow.warm_budget,
        },
        "input_weights": [list(r) for r in cfg.input_weights],
        "horizon_s": cfg.horizon,
        "flow_log_every_s": cfg.flow_log_every,
        "allow_unsafe_start": cfg.allow_unsafe_start,
    }


def save_scenario(cfg: ScenarioConfig, path):
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2)
        f.write("\n")


@dataclass
class TrajectoryLog:
    """Complete record of one simulation run.

    Arrays are indexed by step (horizon/dt + 1 records including t=0);
    the input row at the final time is the input the controller would
    apply next. Flow variables are subsampled at flow_log_every.
    """

    meta: dict
    constraint_desc: tuple[str, ...]
    t: np.ndarray
    s: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    u: np.ndarray
    margins: np.ndarray
    waypoint_index: np.ndarray
    infeasible_events: tuple[tuple[int, int], ...]
    waypoint_events: tuple[tuple[float, int], ...]
    lambda_min: float
    flow_t: np.ndarray
    flow_gamma: np.ndarray
    flow_z: np.ndarray
    flow_lambda: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.s.shape[1]

    def equals_bitwise(self, other: "TrajectoryLog") -> bool:
        """True when every logged array matches bit for bit."""
        arrays = ("t", "s", "theta", "p", "u", "margins", "waypoint_index",
                  "flow_t", "flow_gamma", "flow_z", "flow_lambda")
        for name in arrays:
            if getattr(self, name).tobytes() != getattr(other, name).tobytes():
                return False
        return (
            self.infeasible_events == other.infeasible_events
            and self.waypoint_events == other.waypoint_events
            and self.lambda_min == other.lambda_min
            and self.constraint_desc == other.constraint_desc
        )

    def trajectory_frame(self) -> pd.DataFrame:
        steps, n = self.s.shape[0], self.s.shape[1]
        agent_ids = np.asarray(self.meta["agent_ids"])
        return pd.DataFrame(
            {
                "t": np.repeat(self.t, n),
                "agent": np.tile(agent_ids, steps),
                "x": self.s[:, :, 0].reshape(-1),
                "y": self.s[:, :, 1].reshape(-1),
                "theta": self.theta.reshape(-1),
                "px": self.p[:, :, 0].reshape(-1),
                "py": self.p[:, :, 1].reshape(-1),
                "v": self.u[:, :, 0].reshape(-1),
                "w": self.u[:, :, 1].reshape(-1),
            }
        )

    def margins_frame(self) -> pd.DataFrame:
        steps, n_c = self.margins.shape
        flags = np.zeros((steps, n_c), dtype=np.int8)
        member_map = self.meta["constraint_members"]
        by_step: dict[int, list[int]] = {}
        for step, agent in self.infeasible_events:
            by_step.setdefault(step, []).append(agent)
        for step, agents in by_step.items():
            for k, members in enumerate(member_map):
                if any(a in members for a in agents):
                    flags[step, k] = 1
        return pd.DataFrame(
            {
                "t": np.repeat(self.t, n_c),
                "constraint": np.tile(np.arange(n_c), steps),
                "kind": np.tile(np.asarray(self.constraint_desc, dtype=object), steps),
                "margin": self.margins.reshape(-1),
                "flag": flags.reshape(-1),
            }
        )

    def flow_frame(self) -> pd.DataFrame:
        records = []
        n = self.flow_gamma.shape[1] if self.flow_gamma.size else 0
        q = self.flow_z.shape[1] if self.flow_z.size else 0
        for k, tk in enumerate(self.flow_t):
            for ai in range(n):
                records.append((tk, f"gamma[{ai}].v", self.flow_gamma[k, ai, 0]))
                records.append((tk, f"gamma[{ai}].w", self.flow_gamma[k, ai, 1]))
            for s_idx in range(q):
                records.append((tk, f"z[{s_idx}]", self.flow_z[k, s_idx]))
                records.append((tk, f"lambda[{s_idx}]", self.flow_lambda[k, s_idx]))
        return pd.DataFrame(records, columns=["t", "name", "value"])

    def write_csv(self, outdir):
        """Write trajectory.csv, margins.csv, flow.csv and run.json into a directory."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        self.trajectory_frame().to_csv(outdir / "trajectory.csv", index=False,
                                       float_format=FLOAT_FMT)
        self.margins_frame().to_csv(outdir / "margins.csv", index=False, float_format=FLOAT_FMT)
        self.flow_frame().to_csv(outdir / "flow.csv", index=False, float_format=FLOAT_FMT)
        run_meta = dict(self.meta)
        run_meta.update(
            {
                "lambda_min": self.lambda_min,
                "infeasible_events": [list(e) for e in self.infeasible_events],
                "waypoint_events": [[t, k] for t, k in self.waypoint_events],
                "version": __version__,
            }
        )
        with open(outdir / "run.json", "w") as f:
            json.dump(run_meta, f, indent=2)
            f.write("\n")


def read_trajectory_csv(path) -> pd.DataFrame:
    return pd.read_csv(path)
