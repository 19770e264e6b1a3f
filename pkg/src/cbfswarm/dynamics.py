"""Unicycle kinematics and the off-axis point transformation.

The planar robots are driftless unicycles

    x' = v cos(theta),  y' = v sin(theta),  theta' = w

controlled through u = (v, w). Barrier constraints act on the off-axis
point p = s + l*R(theta)*e1, whose velocity p' = R(theta) * diag(1, l) * u
depends on both inputs, so every constraint row is affine in u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(angle):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    return np.mod(angle - math.pi, -TWO_PI) + math.pi


def wrap_heading(theta: float) -> float:
    """Normalize a heading into [0, 2*pi)."""
    return float(theta % TWO_PI)


def rotation(theta):
    """2x2 rotation matrix R(theta); works on scalars or arrays of angles."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class AgentState:
    """Planar pose of one agent: position s, heading theta in [0, 2*pi)."""

    s: tuple[float, float]
    theta: float
    id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "s", (float(self.s[0]), float(self.s[1])))
        object.__setattr__(self, "theta", wrap_heading(float(self.theta)))


@dataclass(frozen=True)
class ControlInput:
    """Unicycle input: linear velocity v and angular velocity w."""

    v: float
    w: float

    def __post_init__(self):
        if not (math.isfinite(self.v) and math.isfinite(self.w)):
            raise ValueError(f"non-finite control input ({self.v}, {self.w})")


@dataclass(frozen=True)
class OffAxisParams:
    """Off-axis distance l > 0. The velocity map is singular at l = 0."""

    l: float

    def __post_init__(self):
        if not (self.l > 0.0):
            raise ValueError(f"off-axis distance must be positive, got {self.l}")


def velocity_map(theta, l):
    """Matrix M(theta) = R(theta) * diag(1, l) mapping u to the off-axis velocity.

    Vectorized: for an array of K angles returns shape (K, 2, 2).
    """
    c, s = np.cos(theta), np.sin(theta)
    M = np.empty(np.shape(theta) + (2, 2))
    M[..., 0, 0] = c
    M[..., 0, 1] = -l * s
    M[..., 1, 0] = s
    M[..., 1, 1] = l * c
    return M


def off_axis_points(s, theta, l):
    """Off-axis points p = s + l*(cos theta, sin theta) for stacked poses (N,2), (N,)."""
    return s + l * np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def off_axis_transform(state: AgentState, params: OffAxisParams):
    """Return (p, M): the off-axis point and the input-to-velocity map at this pose.

    p = s + l*R(theta)*e1 and M = R(theta)*diag(1, l), so that p' = M*u.
    det(M) = l for every heading.
    """
    p = off_axis_points(np.asarray(state.s, dtype=float), state.theta, params.l)
    M = velocity_map(state.theta, params.l)
    return p, M


def _unicycle_rhs(s, theta, v, w):
    ds = np.stack([v * np.cos(theta), v * np.sin(theta)], axis=-1)
    return ds, w


def rk4_step_arrays(s, theta, v, w, dt):
    """One classical RK4 step of the unicycle field for stacked agents.

    s: (N, 2), theta/v/w: (N,). Returns (s_next, theta_next) with theta
    normalized into [0, 2*pi). The heading subsystem theta' = w is linear,
    so only the position stages differ across the RK4 evaluations.
    """
    k1s, k1t = _unicycle_rhs(s, theta, v, w)
    k2s, k2t = _unicycle_rhs(s + 0.5 * dt * k1s, theta + 0.5 * dt * k1t, v, w)
    k3s, k3t = _unicycle_rhs(s + 0.5 * dt * k2s, theta + 0.5 * dt * k2t, v, w)
    k4s, k4t = _unicycle_rhs(s + dt * k3s, theta + dt * k3t, v, w)
    s_next = s + (dt / 6.0) * (k1s + 2.0 * k2s + 2.0 * k3s + k4s)
    theta_next = np.mod(theta + (dt / 6.0) * (k1t + 2.0 * k2t + 2.0 * k3t + k4t), TWO_PI)
    return s_next, theta_next


def unicycle_step(state: AgentState, u: ControlInput, dt: float) -> AgentState:
    """Advance one agent by a single RK4 step with u held constant over dt."""
    if dt < 0.0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    s = np.asarray(state.s, dtype=float)[None, :]
    theta = np.asarray([state.theta])
    v = np.asarray([u.v])
    w = np.asarray([u.w])
    s_next, theta_next = rk4_step_arrays(s, theta, v, w, dt)
    return replace(state, s=(float(s_next[0, 0]), float(s_next[0, 1])), theta=float(theta_next[0]))


def unicycle_flow_exact(state: AgentState, u: ControlInput, t: float) -> AgentState:
    """Closed-form unicycle flow for constant input, used as an integration oracle."""
    x, y = state.s
    th = state.theta
    if abs(u.w) < 1e-300:
        x += u.v * t * math.cos(th)
        y += u.v * t * math.sin(th)
        th_next = th
    else:
        th_next = th + u.w * t
        r = u.v / u.w
        x += r * (math.sin(th_next) - math.sin(th))
        y -= r * (math.cos(th_next) - math.cos(th))
    return replace(state, s=(x, y), theta=th_next)
