"""Barrier functions and the affine-in-input safety constraint rows.

Every safety requirement is encoded as a row g(u) = a.u + b <= 0 on one
agent's input:

  * obstacle rows keep the off-axis point outside an inflated obstacle,
    h(p) >= eta, via  -grad_h(p)^T M(theta) u - alpha*(h(p) - eta) <= 0;
  * inter-agent rows keep a pair at squared distance ||p_i - p_j||^2
    above d_min^2; each endpoint carries its own row and the network
    enforces the sum row_i(u_i) + row_j(u_j) <= 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import AgentState, OffAxisParams, off_axis_transform


@dataclass(frozen=True)
class ObstacleSpec:
    """A circular or axis-aligned elliptical keep-out region.

    The barrier value h is positive outside the obstacle; the constraint
    keeps h(p) >= eta with slope alpha on the barrier condition.
    """

    kind: str
    center: tuple[float, float]
    radius: float | None = None
    semi_axes: tuple[float, float] | None = None
    eta: float = 1.5
    alpha: float = 2.0

    def __post_init__(self):
        if self.kind not in ("circle", "ellipse"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        if self.kind == "circle":
            if self.radius is None or not self.radius > 0.0:
                raise ValueError("circle obstacle needs radius > 0")
        else:
            if self.semi_axes is None or min(self.semi_axes) <= 0.0:
                raise ValueError("ellipse obstacle needs strictly positive semi_axes")
            object.__setattr__(
                self, "semi_axes", (float(self.semi_axes[0]), float(self.semi_axes[1]))
            )
        if not self.eta > 0.0:
            raise ValueError("safety margin eta must be positive")
        if not self.alpha > 0.0:
            raise ValueError("barrier slope alpha must be positive")


@dataclass(frozen=True)
class PairSafetyParams:
    """Minimum squared-distance keep-apart constraint between two agents.

    d_min must cover both bodies plus the off-axis offsets
    (d_min >= r_i + r_j + 2*l); the scenario parser validates this per pair.
    """

    d_min: float
    alpha_c: float

    def __post_init__(self):
        if not self.d_min > 0.0:
            raise ValueError("d_min must be positive")
        if not self.alpha_c > 0.0:
            raise ValueError("alpha_c must be positive")


@dataclass(frozen=True)
class ConstraintRow:
    """One affine constraint a.u + b <= 0 on a single agent's input."""

    agent: int
    a: tuple[float, float]
    b: float
    tag: tuple

    def __post_init__(self):
        if not (math.isfinite(self.a[0]) and math.isfinite(self.a[1]) and math.isfinite(self.b)):
            raise ValueError(f"non-finite constraint row {self.a}, {self.b}")

    def value(self, u) -> float:
        return self.a[0] * u[0] + self.a[1] * u[1] + self.b


def barrier_eval(obs: ObstacleSpec, p) -> tuple[float, np.ndarray]:
    """Barrier value and gradient at a point.

    circle:  h = ||p - m||^2 - R^2,        grad = 2*(p - m)
    ellipse: h = ((px-mx)/a)^2 + ((py-my)/b)^2 - 1,
             grad = (2*(px-mx)/a^2, 2*(py-my)/b^2)
    """
    p = np.asarray(p, dtype=float)
    d = p - np.asarray(obs.center)
    if obs.kind == "circle":
        h = float(d @ d) - obs.radius**2
        grad = 2.0 * d
    else:
        ax, ay = obs.semi_axes
        h = (d[0] / ax) ** 2 + (d[1] / ay) ** 2 - 1.0
        grad = np.array([2.0 * d[0] / ax**2, 2.0 * d[1] / ay**2])
    return float(h), grad


def eta_margin(r_i: float, l: float, obs: ObstacleSpec) -> float | None:
    """Margin on h that keeps the whole body of a radius-r_i robot clear.

    For a circular obstacle of radius R the closed form is
    (r_i + l)^2 + 2*R*(r_i + l). Ellipses have no closed form here and
    return None; their margin must be configured explicitly.
    """
    if obs.kind != "circle":
        return None
    c = r_i + l
    return c * c + 2.0 * obs.radius * c


def obstacle_constraint_row(
    obs: ObstacleSpec, state: AgentState, params: OffAxisParams
) -> ConstraintRow:
    """Row enforcing grad_h(p)^T M u >= -alpha*(h - eta) in a.u + b <= 0 form."""
    p, M = off_axis_transform(state, params)
    h, grad = barrier_eval(obs, p)
    a = -(grad @ M)
    b = -obs.alpha * (h - obs.eta)
    return ConstraintRow(
        agent=state.id, a=(float(a[0]), float(a[1])), b=float(b), tag=("obstacle", obs.center)
    )


def interagent_constraint_rows(
    state_i: AgentState,
    state_j: AgentState,
    params: PairSafetyParams,
    offaxis: OffAxisParams,
) -> tuple[ConstraintRow, ConstraintRow]:
    """The two local rows of one keep-apart constraint.

    With d = ||p_i - p_j||^2 - d_min^2, agent i's row is
    -2*(p_i - p_j)^T M_i u_i - alpha_c*d <= 0 and agent j's row is the
    mirror image. Each row carries the full -alpha_c*d offset, so the
    aggregated pair condition row_i(u_i) + row_j(u_j) <= 0 has effective
    slope 2*alpha_c on d.
    """
    if state_i.id == state_j.id:
        raise ValueError("inter-agent constraint needs two distinct agents")
    p_i, M_i = off_axis_transform(state_i, offaxis)
    p_j, M_j = off_axis_transform(state_j, offaxis)
    delta = p_i - p_j
    d = float(delta @ delta) - params.d_min**2
    a_i = -2.0 * (delta @ M_i)
    a_j = -2.0 * (-delta @ M_j)
    b = -params.alpha_c * d
    tag = ("pair", state_i.id, state_j.id)
    row_i = ConstraintRow(agent=state_i.id, a=(float(a_i[0]), float(a_i[1])), b=b, tag=tag)
    row_j = ConstraintRow(agent=state_j.id, a=(float(a_j[0]), float(a_j[1])), b=b, tag=tag)
    return row_i, row_j


def pair_margin(p_i, p_j, d_min: float) -> float:
    """Squared-distance margin ||p_i - p_j||^2 - d_min^2 (nonnegative = safe)."""
    delta = np.asarray(p_i, dtype=float) - np.asarray(p_j, dtype=float)
    return float(delta @ delta) - d_min**2
