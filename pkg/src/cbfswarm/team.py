"""Runtime context derived from a scenario: precomputed structure for the loop.

TeamContext freezes everything that does not change during a run (graph,
slot layout, obstacle geometry arrays, weighting matrix, formation
bookkeeping) and provides the two vectorized evaluations the controller
needs every round: the per-slot constraint rows at the current poses and
the per-agent nominal inputs.
"""

from __future__ import annotations

import numpy as np

from .dynamics import off_axis_points, rotation, velocity_map, wrap_angle
from .formation import k_neighborhoods
from .netgraph import CommGraph, build_subgraphs, mismatch_index
from .scenario import ScenarioConfig

BEARING_LIMIT = 1e-9


class TeamContext:
    """Immutable per-run structure shared by the QP, flow, and oracle paths."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.n_agents = cfg.n_agents
        self.agent_ids = tuple(a.id for a in cfg.agents)
        self._id_to_idx = {aid: idx for idx, aid in enumerate(self.agent_ids)}
        self.leader_idx = self._id_to_idx[cfg.leader_id]
        self.offaxis = cfg.offaxis
        self.l = cfg.offaxis.l
        self.gains = cfg.gains
        self.heading_error_term = cfg.heading_error_term
        self.gamma = np.asarray(cfg.input_weights, dtype=float)
        self.H = self.gamma.T @ self.gamma
        self.Hinv = np.linalg.inv(self.H)

        self.graph = CommGraph(n=cfg.n_agents, edges=cfg.comm_edges)
        self.depths = k_neighborhoods(self.graph, cfg.leader_id)
        self.subgraphs = tuple(
            build_subgraphs(self.graph, cfg.pair_constraints, cfg.obstacle_assignments)
        )
        self.index = mismatch_index(self.graph, self.subgraphs)
        self.n_constraints = len(self.subgraphs)

        q = self.index.q
        self.slot_agent_index = np.array(
            [self._id_to_idx[i] for i, _ in self.index.slots], dtype=int
        )
        self.slot_constraint = np.array([k for _, k in self.index.slots], dtype=int)
        # slots are grouped by agent, so each agent's rows form one contiguous range
        self.slot_ranges = []
        cursor = 0
        for aid in self.agent_ids:
            width = len(self.index.P[aid])
            self.slot_ranges.append((cursor, cursor + width))
            cursor += width

        pair_rows = []
        obs_rows = []
        for s_idx, (i, k) in enumerate(self.index.slots):
            sg = self.subgraphs[k]
            if sg.is_pair:
                j = sg.members[0] if sg.members[1] == i else sg.members[1]
                pair_rows.append((s_idx, self._id_to_idx[i], self._id_to_idx[j]))
            else:
                obs_rows.append((s_idx, self._id_to_idx[i], sg.kind[2]))
        self._pair_slot = np.array([r[0] for r in pair_rows], dtype=int)
        self._pair_i = np.array([r[1] for r in pair_rows], dtype=int)
        self._pair_j = np.array([r[2] for r in pair_rows], dtype=int)
        self._obs_slot = np.array([r[0] for r in obs_rows], dtype=int)
        self._obs_agent = np.array([r[1] for r in obs_rows], dtype=int)
        obs_specs = [cfg.obstacles[r[2]] for r in obs_rows]
        self._obs_center = np.array([o.center for o in obs_specs], dtype=float).reshape(-1, 2)
        self._obs_circle = np.array([o.kind == "circle" for o in obs_specs], dtype=bool)
        self._obs_r2 = np.array(
            [o.radius**2 if o.kind == "circle" else 1.0 for o in obs_specs], dtype=float
        )
        self._obs_inv_ax2 = np.array(
            [1.0 if o.kind == "circle" else 1.0 / o.semi_axes[0] ** 2 for o in obs_specs],
            dtype=float,
        )
        self._obs_inv_ay2 = np.array(
            [1.0 if o.kind == "circle" else 1.0 / o.semi_axes[1] ** 2 for o in obs_specs],
            dtype=float,
        )
        self._obs_alpha = np.array([o.alpha for o in obs_specs], dtype=float)
        self._obs_eta = np.array([o.eta for o in obs_specs], dtype=float)
        self.d_min2 = cfg.d_min**2
        self.alpha_c = cfg.alpha_c
        self.q = q

        # parent averaging matrix and formation offsets (leader row left zero)
        self._parent_avg = np.zeros((self.n_agents, self.n_agents))
        self._form_offsets = np.zeros((self.n_agents, 2))
        for i, parents in cfg.formation.parents.items():
            row = self._id_to_idx[i]
            for pj in parents:
                self._parent_avg[row, self._id_to_idx[pj]] = 1.0 / len(parents)
            self._form_offsets[row] = cfg.formation.offsets[i]
        self._leader_frame = cfg.formation.frame == "leader-heading"

        self.constraint_desc = tuple(
            f"pair({sg.kind[1]},{sg.kind[2]})" if sg.is_pair
            else f"obstacle(agent={sg.kind[1]},obs={sg.kind[2]})"
            for sg in self.subgraphs
        )
        self.constraint_members = tuple(sg.members for sg in self.subgraphs)

    def agent_index(self, agent_id: int) -> int:
        return self._id_to_idx[agent_id]

    def points(self, s, theta):
        return off_axis_points(s, theta, self.l)

    def slot_rows(self, s, theta):
        """Constraint rows at stacked poses.

        Returns (A, b, margins): per-slot coefficients (q, 2) and offsets
        (q,) of the rows a.u + b <= 0, plus the per-constraint safety
        margins (barrier value minus margin for obstacle constraints,
        squared-distance surplus for pairs).
        """
        p = self.points(s, theta)
        M = velocity_map(theta, self.l)
        A = np.zeros((self.q, 2))
        b = np.zeros(self.q)
        margins = np.zeros(self.n_constraints)
        if self._obs_slot.size:
            dp = p[self._obs_agent] - self._obs_center
            grad = np.empty_like(dp)
            h = np.empty(len(dp))
            circ = self._obs_circle
            h[circ] = np.sum(dp[circ] ** 2, axis=1) - self._obs_r2[circ]
            grad[circ] = 2.0 * dp[circ]
            ncirc = ~circ
            if ncirc.any():
                h[ncirc] = (
                    dp[ncirc, 0] ** 2 * self._obs_inv_ax2[ncirc]
                    + dp[ncirc, 1] ** 2 * self._obs_inv_ay2[ncirc]
                    - 1.0
                )
                grad[ncirc, 0] = 2.0 * dp[ncirc, 0] * self._obs_inv_ax2[ncirc]
                grad[ncirc, 1] = 2.0 * dp[ncirc, 1] * self._obs_inv_ay2[ncirc]
            A[self._obs_slot] = -np.einsum("ni,nij->nj", grad, M[self._obs_agent])
            b[self._obs_slot] = -self._obs_alpha * (h - self._obs_eta)
            margins[self.slot_constraint[self._obs_slot]] = h - self._obs_eta
        if self._pair_slot.size:
            delta = p[self._pair_i] - p[self._pair_j]
            d = np.sum(delta**2, axis=1) - self.d_min2
            A[self._pair_slot] = -2.0 * np.einsum("ni,nij->nj", delta, M[self._pair_i])
            b[self._pair_slot] = -self.alpha_c * d
            margins[self.slot_constraint[self._pair_slot]] = d
        return A, b, margins

    def formation_goals(self, p, theta):
        """Formation targets for every agent (the leader row is unused)."""
        offsets = self._form_offsets
        if self._leader_frame:
            offsets = offsets @ rotation(theta[self.leader_idx]).T
        return self._parent_avg @ p + offsets

    def nominal_inputs(self, s, theta, waypoint):
        """Nominal inputs for all agents: leader toward the waypoint, followers
        toward their formation targets, all through the polar steering law."""
        p = self.points(s, theta)
        goals = self.formation_goals(p, theta)
        goals[self.leader_idx] = waypoint
        err = goals - p
        e = np.hypot(err[:, 0], err[:, 1])
        beta = np.arctan2(err[:, 1], err[:, 0])
        thw = wrap_angle(theta)
        alpha = wrap_angle(beta - thw)
        g = self.gains
        v = g.k_r * e * np.cos(alpha)
        near_zero = np.abs(beta) < BEARING_LIMIT
        beta_safe = np.where(near_zero, 1.0, beta)
        shaping = np.where(
            near_zero,
            g.k_r * (beta + g.h_gain * thw),
            0.5 * g.k_r * np.sin(2.0 * beta) * (beta + g.h_gain * thw) / beta_safe,
        )
        first = g.k_a * (alpha if self.heading_error_term else beta)
        u = np.stack([v, first + shaping], axis=-1)
        u[e < g.goal_tol] = 0.0
        return u

    def initial_arrays(self):
        s = np.array([a.start for a in self.cfg.agents], dtype=float)
        theta = np.array([a.theta for a in self.cfg.agents], dtype=float)
        return s, theta


def build_context(cfg: ScenarioConfig) -> TeamContext:
    return TeamContext(cfg)


def stack_states(states):
    s = np.array([st.s for st in states], dtype=float)
    theta = np.array([st.theta for st in states], dtype=float)
    return s, theta
