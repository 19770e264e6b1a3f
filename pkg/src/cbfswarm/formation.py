"""Leader waypoint tracking, follower formation targets, and graph depths.

The leader steers its off-axis point toward the current waypoint with a
polar stabilizing law; each follower steers toward a point derived from
the off-axis points of its parents (neighbors one hop closer to the
leader), so every target is computable from neighbor data only.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import AgentState, ControlInput, OffAxisParams, off_axis_transform, rotation, wrap_angle

BEARING_LIMIT = 1e-9


@dataclass(frozen=True)
class NominalGains:
    """Gains of the nominal steering law plus the waypoint arrival tolerance."""

    k_r: float = 0.5
    k_a: float = 1.0
    h_gain: float = 0.6
    goal_tol: float = 0.3

    def __post_init__(self):
        for name in ("k_r", "k_a", "h_gain", "goal_tol"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"gain {name} must be positive")


@dataclass(frozen=True)
class WaypointPlan:
    """An ordered list of leader waypoints with the index currently tracked."""

    waypoints: tuple[tuple[float, float], ...]
    current_index: int = 0

    def __post_init__(self):
        if len(self.waypoints) == 0:
            raise ValueError("waypoint list must be non-empty")
        if not (0 <= self.current_index < len(self.waypoints)):
            raise ValueError("current_index out of range")
        object.__setattr__(
            self, "waypoints", tuple((float(w[0]), float(w[1])) for w in self.waypoints)
        )

    @property
    def current(self) -> tuple[float, float]:
        return self.waypoints[self.current_index]

    @property
    def at_last(self) -> bool:
        return self.current_index == len(self.waypoints) - 1


@dataclass(frozen=True)
class FormationSpec:
    """Per-follower parents and offsets defining the formation targets.

    frame "world" adds the offset directly to the parents' mean off-axis
    point; "leader-heading" rotates the offset by the leader's heading
    first, so the formation turns with the leader.
    """

    parents: dict[int, tuple[int, ...]]
    offsets: dict[int, tuple[float, float]]
    frame: str = "leader-heading"

    def __post_init__(self):
        if self.frame not in ("world", "leader-heading"):
            raise ValueError(f"unknown formation frame {self.frame!r}")
        for i, par in self.parents.items():
            if len(par) == 0:
                raise ValueError(f"follower {i} has no parents")
            if i not in self.offsets:
                raise ValueError(f"follower {i} has parents but no offset")


def nominal_control(
    state: AgentState,
    goal,
    gains: NominalGains,
    offaxis: OffAxisParams,
    heading_error_term: bool = False,
) -> ControlInput:
    """Polar stabilizing law steering the off-axis point toward a goal.

    With e = ||p - goal|| and bearing beta = atan2(goal - p):

        v = k_r * e * cos(beta - theta)
        w = k_a * beta + (k_r/2) * sin(2*beta) * (beta + h_gain*theta) / beta

    using the analytic limit k_r*(beta + h_gain*theta) when |beta| is
    below 1e-9. Angle differences are wrapped to (-pi, pi]. Inside
    goal_tol the input is exactly (0, 0). With heading_error_term=True
    the first w term uses the wrapped heading error (beta - theta)
    instead of beta.
    """
    p, _ = off_axis_transform(state, offaxis)
    goal = np.asarray(goal, dtype=float)
    err = goal - p
    e = float(math.hypot(err[0], err[1]))
    if e < gains.goal_tol:
        return ControlInput(0.0, 0.0)
    beta = math.atan2(err[1], err[0])
    theta = float(wrap_angle(state.theta))
    alpha = float(wrap_angle(beta - theta))
    v = gains.k_r * e * math.cos(alpha)
    if abs(beta) < BEARING_LIMIT:
        shaping = gains.k_r * (beta + gains.h_gain * theta)
    else:
        shaping = 0.5 * gains.k_r * math.sin(2.0 * beta) * (beta + gains.h_gain * theta) / beta
    first = gains.k_a * (alpha if heading_error_term else beta)
    return ControlInput(v, first + shaping)


def advance_waypoint(plan: WaypointPlan, p_leader, tol: float) -> WaypointPlan:
    """Move to the next waypoint once the leader is strictly within tol; hold at the last."""
    if plan.at_last:
        return plan
    target = plan.current
    p = np.asarray(p_leader, dtype=float)
    if math.hypot(p[0] - target[0], p[1] - target[1]) < tol:
        return replace(plan, current_index=plan.current_index + 1)
    return plan


def k_neighborhoods(graph, leader: int) -> dict[int, int]:
    """BFS depth of every agent from the leader (leader maps to 0).

    Raises ValueError if the graph is disconnected, since followers
    beyond the reachable set have no defined depth.
    """
    depths = {leader: 0}
    queue = deque([leader])
    while queue:
        i = queue.popleft()
        for j in graph.neighbors(i):
            if j not in depths:
                depths[j] = depths[i] + 1
                queue.append(j)
    if len(depths) != graph.n:
        missing = sorted(set(graph.vertices) - set(depths))
        raise ValueError(f"communication graph is disconnected; unreachable agents {missing}")
    return depths


def formation_goal(
    i: int,
    parent_points,
    leader_heading: float,
    spec: FormationSpec,
) -> np.ndarray:
    """Formation target for follower i from its parents' off-axis points.

    parent_points are the off-axis points of spec.parents[i], in order.
    """
    if i not in spec.parents:
        raise KeyError(f"agent {i} has no formation entry")
    pts = np.asarray(parent_points, dtype=float).reshape(-1, 2)
    if pts.shape[0] != len(spec.parents[i]):
        raise ValueError(
            f"agent {i} expects {len(spec.parents[i])} parent points, got {pts.shape[0]}"
        )
    base = pts.mean(axis=0)
    offset = np.asarray(spec.offsets[i], dtype=float)
    if spec.frame == "leader-heading":
        offset = rotation(leader_heading) @ offset
    return base + offset
