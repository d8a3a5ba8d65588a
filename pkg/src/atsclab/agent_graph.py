"""Multi-agent communication graph with hop-distance queries.

Agents sit on an undirected graph; hop distances drive the spatial
discounting of rewards/states and neighbor lists drive fingerprint
exchange. The graph is immutable after construction and all iteration
orders are fixed (sorted by agent id) so downstream consumers are
deterministic.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

UNREACHABLE = float("inf")


class GraphConfigError(ValueError):
    """Raised when a graph description references unknown agents."""


@dataclass(frozen=True)
class AgentNetwork:
    """Agent graph with precomputed all-pairs hop distances.

    dist[i][j] is the minimum number of edges between i and j
    (UNREACHABLE for disconnected pairs). max_dist[i] is the largest
    finite distance from i. rings[i] lists (d, agents at distance d)
    in ascending d with agent ids ascending inside each ring.
    """

    n_agents: int
    edges: frozenset[tuple[int, int]]
    adjacency: tuple[tuple[int, ...], ...]
    dist: np.ndarray
    max_dist: tuple[int, ...]
    rings: tuple[tuple[tuple[int, tuple[int, ...]], ...], ...]

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.adjacency[i]

    def distance(self, i: int, j: int) -> float:
        """Exact shortest hop count between two agents (inf if disconnected)."""
        return float(self.dist[i, j])

    def local_region(self, i: int) -> list[int]:
        """Agent i followed by its neighbors in ascending id order."""
        return [i, *self.adjacency[i]]


def build_agent_graph(edges, n_agents: int) -> AgentNetwork:
    """Build an AgentNetwork from undirected edges over [0, n_agents).

    Duplicate edges are ignored. Self-loops or out-of-range ids raise
    GraphConfigError.
    """
    if n_agents < 1:
        raise GraphConfigError(f"n_agents must be >= 1, got {n_agents}")
    edge_set: set[tuple[int, int]] = set()
    adj: list[set[int]] = [set() for _ in range(n_agents)]
    for a, b in edges:
        a, b = int(a), int(b)
        for x in (a, b):
            if not 0 <= x < n_agents:
                raise GraphConfigError(f"edge ({a}, {b}) references unknown agent id {x}")
        if a == b:
            raise GraphConfigError(f"self-loop on agent {a} is not allowed")
        edge_set.add((min(a, b), max(a, b)))
        adj[a].add(b)
        adj[b].add(a)

    adjacency = tuple(tuple(sorted(s)) for s in adj)
    dist = np.full((n_agents, n_agents), UNREACHABLE)
    for src in range(n_agents):
        dist[src, src] = 0.0
        frontier = deque([src])
        while frontier:
            u = frontier.popleft()
            for v in adjacency[u]:
                if dist[src, v] == UNREACHABLE:
                    dist[src, v] = dist[src, u] + 1.0
                    frontier.append(v)
    dist.setflags(write=False)

    max_dist = []
    rings = []
    for i in range(n_agents):
        finite = dist[i][np.isfinite(dist[i])]
        d_i = int(finite.max())
        max_dist.append(d_i)
        by_d = []
        for d in range(d_i + 1):
            members = tuple(int(j) for j in range(n_agents) if dist[i, j] == d)
            by_d.append((d, members))
        rings.append(tuple(by_d))

    return AgentNetwork(
        n_agents=n_agents,
        edges=frozenset(edge_set),
        adjacency=adjacency,
        dist=dist,
        max_dist=tuple(max_dist),
        rings=tuple(rings),
    )
