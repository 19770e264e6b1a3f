"""Strictly convex QP solves: per-agent input filters and centralized oracles.

All problems share the shape

    min  (1/2) (x - t)' H (x - t)   s.t.  A x + b <= 0

with H positive definite. They are solved exactly by a dual active-set
iteration (start at the unconstrained optimum, add the most violated
constraint, take dual steps until its multiplier set is consistent),
which terminates finitely, certifies optimality through its own KKT
conditions, and detects infeasibility when the dual becomes unbounded.
Ties are broken toward the lowest row index so identical inputs always
take identical paths.

The per-agent problem has two variables and a handful of rows and runs
inside the control loop, so it gets a scalar-arithmetic implementation;
the centralized problems (over all inputs, or all inputs plus mismatch
variables) use the same algorithm with dense numpy linear algebra plus
a final refinement of the active-set KKT system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FEAS_TOL = 1e-10
DEP_TOL = 1e-12
RATIO_TOL = 1e-12


@dataclass
class LocalQP:
    """One agent's input-selection QP: rows already carry mismatch offsets."""

    agent: int
    H: np.ndarray
    target: np.ndarray
    a: np.ndarray
    b: np.ndarray
    tags: tuple = ()

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.target = np.asarray(self.target, dtype=float)
        self.a = np.asarray(self.a, dtype=float).reshape(-1, 2)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        eigs = np.linalg.eigvalsh(self.H)
        if eigs[0] <= 1e-10:
            raise ValueError(f"QP weight matrix must be positive definite, eigmin={eigs[0]:g}")


@dataclass
class QPSolution:
    """Optimal input and row multipliers, or an infeasibility flag."""

    u: np.ndarray
    multipliers: np.ndarray
    status: str

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@dataclass
class CentralizedSolution:
    """Solution of a centralized problem at one team state.

    For the regularized problem lam has one entry per (agent, constraint)
    slot and z the matching mismatch values; for the coupled problem over
    inputs alone z is None and lam has one entry per constraint.
    """

    u: np.ndarray
    z: np.ndarray | None
    lam: np.ndarray
    objective: float
    status: str
    kkt: tuple = field(default=(np.nan, np.nan, np.nan))

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def prepare_weight(H) -> tuple[float, float, float, float, float, float]:
    """Precompute (h11, h12, h22, i11, i12, i22) for the scalar solver."""
    H = np.asarray(H, dtype=float)
    h11, h12, h22 = float(H[0, 0]), float(H[0, 1]), float(H[1, 1])
    det_h = h11 * h22 - h12 * h12
    return h11, h12, h22, h22 / det_h, -h12 / det_h, h11 / det_h


def _solve_2var(hf, t1, t2v, a1, a2, bs):
    """Scalar-arithmetic dual active-set iteration for two variables.

    hf is prepare_weight(H); a1/a2/bs are plain float lists. Returns
    (status, x1, x2, working set, working multipliers).
    """
    _, _, _, i11, i12, i22 = hf
    nrows = len(bs)
    x1, x2 = t1, t2v
    work: list[int] = []
    mus: list[float] = []

    for _ in range(10 * nrows + 20):
        # entering constraint: most violated row outside the working set
        p = -1
        worst = FEAS_TOL
        for r in range(nrows):
            if r in work:
                continue
            v = a1[r] * x1 + a2[r] * x2 + bs[r]
            if v > worst:
                worst = v
                p = r
        if p < 0:
            return "optimal", x1, x2, work, mus

        np1, np2 = -a1[p], -a2[p]
        s_p = np1 * x1 + np2 * x2 - bs[p]
        mu_p = 0.0
        g1 = i11 * np1 + i12 * np2
        g2 = i12 * np1 + i22 * np2

        for _ in range(8):
            # step direction z in the primal, multiplier rates r_vec on the working set
            if not work:
                z1, z2 = g1, g2
                r_vec = []
            elif len(work) == 1:
                w = work[0]
                nw1, nw2 = -a1[w], -a2[w]
                q1 = i11 * nw1 + i12 * nw2
                q2 = i12 * nw1 + i22 * nw2
                bq = nw1 * q1 + nw2 * q2
                r0 = (nw1 * g1 + nw2 * g2) / bq
                z1, z2 = g1 - q1 * r0, g2 - q2 * r0
                r_vec = [r0]
            else:
                wa, wb = work
                na1, na2 = -a1[wa], -a2[wa]
                nb1, nb2 = -a1[wb], -a2[wb]
                det_n = na1 * nb2 - nb1 * na2
                r_vec = [(np1 * nb2 - nb1 * np2) / det_n, (na1 * np2 - np1 * na2) / det_n]
                z1 = z2 = 0.0

            z_small = (z1 * z1 + z2 * z2) <= DEP_TOL**2 * (1.0 + g1 * g1 + g2 * g2)
            # blocking dual step over working multipliers
            tb = float("inf")
            jb = -1
            for jj, rr in enumerate(r_vec):
                if rr > RATIO_TOL:
                    cand = mus[jj] / rr
                    if cand < tb:
                        tb = cand
                        jb = jj
            if z_small:
                if jb < 0:
                    return "infeasible", x1, x2, work, mus
                for jj in range(len(mus)):
                    mus[jj] -= tb * r_vec[jj]
                mu_p += tb
                del work[jb], mus[jb]
                continue
            denom = np1 * z1 + np2 * z2
            t_full = -s_p / denom
            t = min(tb, t_full)
            x1 += t * z1
            x2 += t * z2
            s_p += t * denom
            mu_p += t
            for jj in range(len(mus)):
                mus[jj] -= t * r_vec[jj]
            if t_full <= tb:
                work.append(p)
                mus.append(mu_p)
                break
            del work[jb], mus[jb]
        else:
            raise RuntimeError("active-set inner loop failed to converge")
    raise RuntimeError("active-set iteration budget exceeded")


def solve_qp(qp: LocalQP) -> QPSolution:
    """Exact active-set solve of a two-variable QP with affine rows."""
    hf = prepare_weight(qp.H)
    status, x1, x2, work, mus = _solve_2var(
        hf,
        float(qp.target[0]),
        float(qp.target[1]),
        qp.a[:, 0].tolist(),
        qp.a[:, 1].tolist(),
        qp.b.tolist(),
    )
    mult = np.zeros(len(qp.b))
    if status == "optimal":
        for w, m in zip(work, mus):
            mult[w] = max(m, 0.0)
    return QPSolution(u=np.array([x1, x2]), multipliers=mult, status=status)


def kkt_residuals(H, target, a, b, u, mu):
    """(stationarity, feasibility, complementarity) residuals of a candidate point.

    stationarity: || H (u - target) + a' mu ||_inf
    feasibility:  max(0, max_r a_r.u + b_r)  and  max(0, -min mu)
    complementarity: max_r | mu_r * (a_r.u + b_r) |
    """
    H = np.asarray(H, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u = np.asarray(u, dtype=float)
    mu = np.asarray(mu, dtype=float)
    g = a @ u + b if a.size else np.zeros(0)
    stat = np.abs(H @ (u - np.asarray(target, dtype=float)) + (a.T @ mu if a.size else 0.0)).max()
    feas = max(float(g.max(initial=0.0)), float((-mu).max(initial=0.0)))
    comp = float(np.abs(mu * g).max(initial=0.0))
    return float(stat), feas, comp


def _dual_active_set(H, Hinv, target, A, b, max_iter=None):
    """Dense n-dimensional variant of the dual active-set iteration.

    Returns (status, x, multipliers, active_list).
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    nrows = A.shape[0]
    x = np.asarray(target, dtype=float).copy()
    work: list[int] = []
    mus: list[float] = []
    if max_iter is None:
        max_iter = 30 * (nrows + 2)

    for _ in range(max_iter):
        viol = A @ x + b if nrows else np.zeros(0)
        for w in work:
            viol[w] = -np.inf
        p = -1
        if nrows:
            p = int(np.argmax(viol))
            if viol[p] <= FEAS_TOL:
                p = -1
        if p < 0:
            mult = np.zeros(nrows)
            for w, m in zip(work, mus):
                mult[w] = max(m, 0.0)
            return "optimal", x, mult, list(work)

        n_p = -A[p]
        s_p = float(n_p @ x - b[p])
        mu_p = 0.0
        g = Hinv @ n_p

        for _ in range(len(work) + 3):
            if work:
                N = -A[work].T
                HinvN = Hinv @ N
                B = N.T @ HinvN
                r_vec = np.linalg.solve(B, N.T @ g)
                z = g - HinvN @ r_vec
            else:
                r_vec = np.zeros(0)
                z = g
            z_small = float(z @ z) <= DEP_TOL**2 * (1.0 + float(g @ g))
            tb = np.inf
            jb = -1
            for jj, rr in enumerate(r_vec):
                if rr > RATIO_TOL:
                    cand = mus[jj] / rr
                    if cand < tb:
                        tb = float(cand)
                        jb = jj
            if z_small:
                if jb < 0:
                    return "infeasible", x, np.zeros(nrows), list(work)
                for jj in range(len(mus)):
                    mus[jj] -= tb * float(r_vec[jj])
                mu_p += tb
                del work[jb], mus[jb]
                continue
            denom = float(n_p @ z)
            t_full = -s_p / denom
            t = min(tb, t_full)
            x = x + t * z
            s_p += t * denom
            mu_p += t
            for jj in range(len(mus)):
                mus[jj] -= t * float(r_vec[jj])
            if t_full <= tb:
                work.append(p)
                mus.append(mu_p)
                break
            del work[jb], mus[jb]
        else:
            raise RuntimeError("active-set inner loop failed to converge")
    raise RuntimeError("active-set iteration budget exceeded")


def _polish_active_set(H, target, A, b, active):
    """Re-solve the equality KKT system on the final active set.

    One step of iterative refinement keeps the residuals near machine
    precision even when H mixes widely different curvature scales.
    """
    n = H.shape[0]
    x = np.asarray(target, dtype=float).copy()
    if not active:
        return x, np.zeros(0)
    Aact = np.asarray(A, dtype=float)[active]
    m = Aact.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = Aact.T
    K[n:, :n] = Aact
    rhs = np.concatenate([H @ target, -np.asarray(b, dtype=float)[active]])
    sol = np.linalg.solve(K, rhs)
    resid = rhs - K @ sol
    sol = sol + np.linalg.solve(K, resid)
    return sol[:n], np.maximum(sol[n:], 0.0)


def _solve_dense(H, target, A, b):
    """Dual active-set solve plus KKT polish; returns (status, x, multipliers)."""
    Hinv = np.linalg.inv(H)
    status, x, mult, active = _dual_active_set(H, Hinv, target, A, b)
    if status != "optimal":
        return status, x, mult
    x, mu_act = _polish_active_set(H, target, A, b, active)
    mult = np.zeros(len(b))
    mult[active] = mu_act
    return status, x, mult


def assemble_local_qp(i, states, z, index, ctx, waypoint) -> LocalQP:
    """Build agent i's QP at the current poses and mismatch variables.

    One row per constraint the agent belongs to, with each offset shifted
    by that slot's neighbor mismatch sum; the target is the agent's
    nominal input. Rows only involve poses of the agent and its
    communication neighbors, and mismatch values of slots it can see.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (index.q,):
        raise ValueError(f"z has shape {z.shape}, expected ({index.q},)")
    s = np.array([st.s for st in states], dtype=float)
    theta = np.array([st.theta for st in states], dtype=float)
    A_slot, b_slot, _ = ctx.slot_rows(s, theta)
    shifts = index.mismatch_sums(z)
    rows = [index.slot(i, k) for k in index.P[i]]
    unom = ctx.nominal_inputs(s, theta, waypoint)[ctx.agent_index(i)]
    tags = tuple(ctx.index.slots[r] for r in rows)
    return LocalQP(
        agent=i,
        H=ctx.H,
        target=unom,
        a=A_slot[rows],
        b=b_slot[rows] + shifts[rows],
        tags=tags,
    )


def _centralized_rows_regularized(ctx, A_slot, b_slot):
    """Constraint matrix over (stacked inputs, mismatch vector)."""
    q = ctx.index.q
    n_u = 2 * ctx.n_agents
    A = np.zeros((q, n_u + q))
    for s_idx in range(q):
        ai = ctx.slot_agent_index[s_idx]
        A[s_idx, 2 * ai : 2 * ai + 2] = A_slot[s_idx]
    A[:, n_u:] = ctx.index.laplacian
    return A, b_slot.copy()


def solve_centralized_regularized(states, eps, ctx, waypoint) -> CentralizedSolution:
    """Oracle solve of the mismatch-decoupled problem with quadratic z penalty.

    The penalty is (eps/2) * ||z||^2, so the z stationarity condition is
    eps * z_s + sum of neighbor multiplier differences = 0 -- the same
    equilibrium the mismatch flow reaches for the same eps value.
    """
    if not eps > 0.0:
        raise ValueError("eps must be positive")
    s = np.array([st.s for st in states], dtype=float)
    theta = np.array([st.theta for st in states], dtype=float)
    A_slot, b_slot, _ = ctx.slot_rows(s, theta)
    unom = ctx.nominal_inputs(s, theta, waypoint)
    q = ctx.index.q
    n_u = 2 * ctx.n_agents
    H = np.zeros((n_u + q, n_u + q))
    for ai in range(ctx.n_agents):
        H[2 * ai : 2 * ai + 2, 2 * ai : 2 * ai + 2] = ctx.H
    H[n_u:, n_u:] = eps * np.eye(q)
    target = np.concatenate([unom.reshape(-1), np.zeros(q)])
    A, b = _centralized_rows_regularized(ctx, A_slot, b_slot)
    status, x, mult = _solve_dense(H, target, A, b)
    if status != "optimal":
        return CentralizedSolution(
            u=np.full((ctx.n_agents, 2), np.nan), z=None, lam=mult, objective=np.nan, status=status
        )
    u = x[:n_u].reshape(ctx.n_agents, 2)
    z = x[n_u:]
    obj = 0.5 * float(np.einsum("ni,ij,nj->", u - unom, ctx.H, u - unom)) + 0.5 * eps * float(
        z @ z
    )
    kkt = kkt_residuals(H, target, A, b, x, mult)
    return CentralizedSolution(u=u, z=z, lam=mult, objective=obj, status=status, kkt=kkt)


def solve_centralized_unregularized(states, ctx, waypoint) -> CentralizedSolution:
    """Oracle solve of the coupled problem over inputs only.

    Each constraint is the sum of its member rows, so a keep-apart pair
    contributes a single row over both agents' inputs.
    """
    s = np.array([st.s for st in states], dtype=float)
    theta = np.array([st.theta for st in states], dtype=float)
    A_slot, b_slot, _ = ctx.slot_rows(s, theta)
    unom = ctx.nominal_inputs(s, theta, waypoint)
    n_u = 2 * ctx.n_agents
    n_c = len(ctx.index.subgraphs)
    A = np.zeros((n_c, n_u))
    b = np.zeros(n_c)
    for s_idx in range(ctx.index.q):
        ai = ctx.slot_agent_index[s_idx]
        k = ctx.slot_constraint[s_idx]
        A[k, 2 * ai : 2 * ai + 2] += A_slot[s_idx]
        b[k] += b_slot[s_idx]
    H = np.zeros((n_u, n_u))
    for ai in range(ctx.n_agents):
        H[2 * ai : 2 * ai + 2, 2 * ai : 2 * ai + 2] = ctx.H
    target = unom.reshape(-1)
    status, x, mult = _solve_dense(H, target, A, b)
    if status != "optimal":
        return CentralizedSolution(
            u=np.full((ctx.n_agents, 2), np.nan), z=None, lam=mult, objective=np.nan, status=status
        )
    u = x.reshape(ctx.n_agents, 2)
    obj = 0.5 * float(np.einsum("ni,ij,nj->", u - unom, ctx.H, u - unom))
    kkt = kkt_residuals(H, target, A, b, x, mult)
    return CentralizedSolution(u=u, z=None, lam=mult, objective=obj, status=status, kkt=kkt)
