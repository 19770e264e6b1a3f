"""Communication graph, constraint subgraphs, and the mismatch variable layout.

Each safety constraint k lives on a connected subgraph of the
communication graph: a two-node subgraph for a keep-apart pair, a
singleton for an obstacle constraint. Every (agent, constraint)
membership owns one slot in the flat layout shared by the mismatch
variables z and the multipliers lambda; neighbor differences of z
telescope to zero over each subgraph, which is what lets the summed
network constraint be split into locally checkable rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CommGraph:
    """Undirected connected communication graph over agents 1..n."""

    n: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("graph needs at least one vertex")
        canon = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop on agent {i}")
            if not (1 <= i <= self.n and 1 <= j <= self.n):
                raise ValueError(f"edge ({i},{j}) outside vertex range 1..{self.n}")
            canon.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", tuple(sorted(canon)))
        if self.n > 1:
            self._check_connected()

    def _check_connected(self):
        adj = self.adjacency()
        seen = {1}
        stack = [1]
        while stack:
            for j in adj[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        if len(seen) != self.n:
            missing = sorted(set(self.vertices) - seen)
            raise ValueError(f"communication graph is disconnected; isolated from agent 1: {missing}")

    @property
    def vertices(self) -> range:
        return range(1, self.n + 1)

    def adjacency(self) -> dict[int, tuple[int, ...]]:
        adj: dict[int, list[int]] = {i: [] for i in self.vertices}
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return {i: tuple(sorted(v)) for i, v in adj.items()}

    def neighbors(self, i: int) -> tuple[int, ...]:
        return tuple(sorted(j for a, b in self.edges for j in ((b,) if a == i else (a,) if b == i else ())))

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in set(self.edges)


@dataclass(frozen=True)
class ConstraintSubgraph:
    """The agents coupled by one constraint: a pair edge or an obstacle singleton."""

    k: int
    members: tuple[int, ...]
    kind: tuple

    @property
    def is_pair(self) -> bool:
        return self.kind[0] == "pair"


def build_subgraphs(graph: CommGraph, pair_list, obstacle_assignments) -> list[ConstraintSubgraph]:
    """Deterministically enumerate constraint subgraphs.

    Pair constraints come first, sorted lexicographically after
    canonicalizing to i < j; each pair must be a communication edge.
    Obstacle constraints follow, sorted by (agent, obstacle id).
    obstacle_assignments maps agent id -> iterable of obstacle ids.
    """
    pairs = sorted({(min(i, j), max(i, j)) for i, j in pair_list})
    for i, j in pairs:
        if i == j:
            raise ValueError(f"pair constraint on a single agent {i}")
        if not graph.has_edge(i, j):
            raise ValueError(
                f"pair constraint ({i},{j}) is not a communication edge; "
                "the coupled agents could not evaluate it"
            )
    subgraphs = [
        ConstraintSubgraph(k=k, members=(i, j), kind=("pair", i, j))
        for k, (i, j) in enumerate(pairs)
    ]
    obs = sorted(
        (agent, ob) for agent, obs_ids in obstacle_assignments.items() for ob in obs_ids
    )
    for agent, ob in obs:
        if not (1 <= agent <= graph.n):
            raise ValueError(f"obstacle assignment references unknown agent {agent}")
    subgraphs.extend(
        ConstraintSubgraph(k=len(pairs) + idx, members=(agent,), kind=("obstacle", agent, ob))
        for idx, (agent, ob) in enumerate(obs)
    )
    return subgraphs


@dataclass(frozen=True)
class MismatchIndex:
    """Flat slot layout for the per-(agent, constraint) variables z and lambda.

    Slots are ordered by agent id, then by constraint id within each
    agent, so identical inputs always produce identical layouts. For
    each slot the index also records the slots of the communication
    neighbors inside the same constraint subgraph, which is everything
    the mismatch coupling terms need.
    """

    subgraphs: tuple[ConstraintSubgraph, ...]
    P: dict[int, tuple[int, ...]]
    slots: tuple[tuple[int, int], ...]
    slot_of: dict[tuple[int, int], int]
    neighbor_slots: tuple[tuple[int, ...], ...]
    q: int
    laplacian: np.ndarray = field(repr=False, compare=False)

    def slot(self, i: int, k: int) -> int:
        return self.slot_of[(i, k)]

    def slots_of_constraint(self, k: int) -> list[int]:
        return [self.slot_of[(i, k)] for i in self.subgraphs[k].members]

    def mismatch_sums(self, z: np.ndarray) -> np.ndarray:
        """Per-slot sum over in-subgraph neighbors of (z_self - z_neighbor)."""
        return self.laplacian @ z


def mismatch_index(graph: CommGraph, subgraphs) -> MismatchIndex:
    """Build the deterministic slot layout for a list of constraint subgraphs."""
    subgraphs = tuple(subgraphs)
    adj = graph.adjacency()
    P: dict[int, tuple[int, ...]] = {
        i: tuple(sg.k for sg in subgraphs if i in sg.members) for i in graph.vertices
    }
    slots = tuple((i, k) for i in graph.vertices for k in P[i])
    slot_of = {pair: idx for idx, pair in enumerate(slots)}
    q = len(slots)
    neighbor_slots = []
    lap = np.zeros((q, q))
    for idx, (i, k) in enumerate(slots):
        coupled = tuple(
            slot_of[(j, k)] for j in adj[i] if j in subgraphs[k].members
        )
        neighbor_slots.append(coupled)
        lap[idx, idx] = len(coupled)
        for other in coupled:
            lap[idx, other] -= 1.0
    return MismatchIndex(
        subgraphs=subgraphs,
        P=P,
        slots=slots,
        slot_of=slot_of,
        neighbor_slots=tuple(neighbor_slots),
        q=q,
        laplacian=lap,
    )


def two_nearest_edges(positions: dict[int, tuple[float, float]]) -> tuple[tuple[int, int], ...]:
    """Symmetrized 2-nearest-neighbor edge set from initial positions.

    Ties are broken by agent id so the result is deterministic.
    """
    ids = sorted(positions)
    edges = set()
    for i in ids:
        pi = np.asarray(positions[i], dtype=float)
        ranked = sorted(
            (float(np.linalg.norm(np.asarray(positions[j]) - pi)), j) for j in ids if j != i
        )
        for _, j in ranked[:2]:
            edges.add((min(i, j), max(i, j)))
    return tuple(sorted(edges))
