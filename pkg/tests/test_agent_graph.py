import numpy as np
import pytest

from atsclab.agent_graph import UNREACHABLE, GraphConfigError, build_agent_graph


def brute_force_distances(n, edges):
    """Floyd-Warshall all-pairs shortest paths, independent of the BFS path."""
    big = float("inf")
    d = [[0.0 if i == j else big for j in range(n)] for i in range(n)]
    for a, b in edges:
        d[a][b] = 1.0
        d[b][a] = 1.0
    for k in range(n):
        for i in range(n):
            for j in range(n):
                if d[i][k] + d[k][j] < d[i][j]:
                    d[i][j] = d[i][k] + d[k][j]
    return d


def grid_edges(n):
    edges = []
    for r in range(n):
        for c in range(n):
            i = r * n + c
            if c + 1 < n:
                edges.append((i, i + 1))
            if r + 1 < n:
                edges.append((i, i + n))
    return edges


def test_singleton_graph():
    g = build_agent_graph([], 1)
    assert g.neighbors(0) == ()
    assert g.local_region(0) == [0]
    assert g.max_dist[0] == 0
    assert g.distance(0, 0) == 0.0


def test_chain():
    g = build_agent_graph([(0, 1), (1, 2)], 3)
    assert g.distance(0, 2) == 2.0
    assert g.neighbors(1) == (0, 2)
    assert g.local_region(1) == [1, 0, 2]
    assert g.distance(0, 1) == 1.0


def test_5x5_grid_lattice():
    g = build_agent_graph(grid_edges(5), 25)
    interior = [r * 5 + c for r in range(1, 4) for c in range(1, 4)]
    for i in interior:
        assert len(g.neighbors(i)) == 4
    assert g.distance(0, 24) == 8.0
    assert g.max_dist[0] == 8


def test_3x3_center_to_corner():
    g = build_agent_graph(grid_edges(3), 9)
    assert g.distance(4, 0) == 2.0
    assert g.local_region(4) == [4, 1, 3, 5, 7]


def test_duplicate_edges_ignored():
    g = build_agent_graph([(0, 1), (1, 0), (0, 1)], 2)
    assert g.edges == frozenset({(0, 1)})


def test_unknown_agent_id_rejected():
    with pytest.raises(GraphConfigError, match="5"):
        build_agent_graph([(0, 5)], 3)
    with pytest.raises(GraphConfigError):
        build_agent_graph([(1, 1)], 3)


def test_disconnected_pairs_are_unreachable():
    g = build_agent_graph([(0, 1)], 3)
    assert g.distance(0, 2) == UNREACHABLE
    assert g.max_dist[2] == 0
    # rings only cover reachable agents
    assert g.rings[0] == ((0, (0,)), (1, (1,)))


def test_distance_matches_brute_force_on_1000_connected_graphs():
    rng = np.random.default_rng(7)
    done = 0
    while done < 1000:
        n = int(rng.integers(1, 9))
        possible = [(i, j) for i in range(n) for j in range(i + 1, n)]
        edges = [e for e in possible if rng.random() < 0.45]
        oracle = brute_force_distances(n, edges)
        if any(oracle[0][j] == float("inf") for j in range(n)):
            continue  # keep only connected samples
        done += 1
        g = build_agent_graph(edges, n)
        for i in range(n):
            for j in range(n):
                assert g.distance(i, j) == oracle[i][j]
                assert g.distance(i, j) == g.distance(j, i)


def test_local_region_properties():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(1, 9))
        possible = [(i, j) for i in range(n) for j in range(i + 1, n)]
        edges = [e for e in possible if rng.random() < 0.5]
        g = build_agent_graph(edges, n)
        for i in range(n):
            region = g.local_region(i)
            assert region[0] == i
            assert len(region) == 1 + len(g.neighbors(i))
            assert region[1:] == sorted(g.neighbors(i))


def test_iteration_order_is_reproducible():
    edges = [(3, 1), (0, 2), (2, 1), (0, 3)]
    a = build_agent_graph(edges, 4)
    b = build_agent_graph(list(reversed(edges)), 4)
    assert a.adjacency == b.adjacency
    assert a.rings == b.rings
