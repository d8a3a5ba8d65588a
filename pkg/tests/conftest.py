import numpy as np
import pytest

from atsclab.agent_graph import build_agent_graph
from atsclab.traffic.scenario import (
    Link,
    Node,
    PhaseTable,
    RoadNetwork,
    Scenario,
)


def cross_scenario(length=200.0, speed=20.0, out_length=None, out_speed=None, flows=()):
    """Single four-way intersection with one-lane straight-through roads.

    Phase 0 gives east-west green, phase 1 north-south. Useful for
    hand simulations where every vehicle movement is controlled.
    """
    out_length = out_length or length
    out_speed = out_speed or speed
    nodes = {"x": Node("x", "intersection", agent=0)}
    for t in ("t_a", "t_b", "t_c", "t_d"):
        nodes[t] = Node(t, "terminal")
    links = {}

    def add(frm, to, ln, sp):
        lid = f"{frm}->{to}"
        links[lid] = Link(id=lid, frm=frm, to=to, length=ln, lanes=1, speed_limit=sp)

    # t_a west, t_b east, t_c north, t_d south
    for t in ("t_a", "t_b", "t_c", "t_d"):
        add(t, "x", length, speed)
        add("x", t, out_length, out_speed)
    ew = frozenset({("t_a->x", 0, "x->t_b"), ("t_b->x", 0, "x->t_a")})
    ns = frozenset({("t_c->x", 0, "x->t_d"), ("t_d->x", 0, "x->t_c")})
    return Scenario(
        network=RoadNetwork(nodes=nodes, links=links),
        phases=PhaseTable(phases={0: (ew, ns)}),
        flows=tuple(flows),
        graph=build_agent_graph([], 1),
        agent_nodes=("x",),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
