"""Road network, signal phases and demand description.

A Scenario bundles the four static ingredients the simulator and the
agents consume: the directed RoadNetwork, the per-intersection
PhaseTable, the FlowSchedule and the AgentNetwork used for spatial
discounting. Scenarios serialize to a JSON document with sections
nodes / links / phases / flows / agent_edges (see to_doc / from_doc).

The built-in grid generator lays out an n x n lattice of four-way
signalized intersections ringed by boundary terminals, with two-lane
arterial rows crossing one-lane avenues and four time-variant demand
groups (major west-east, minor south-north, then both reversed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from atsclab.agent_graph import AgentNetwork, build_agent_graph

SCENARIO_FORMAT = "atsclab-scenario-v1"


class ScenarioError(ValueError):
    """Raised for malformed scenario descriptions."""


@dataclass(frozen=True)
class Node:
    id: str
    kind: str  # "intersection" | "terminal"
    agent: int | None = None


@dataclass(frozen=True)
class Link:
    id: str
    frm: str
    to: str
    length: float  # m
    lanes: int
    speed_limit: float  # m/s

    @property
    def travel_time(self) -> float:
        """Free-flow traversal time in seconds."""
        return self.length / self.speed_limit


# movement: vehicles on (in_link, lane) may proceed onto out_link
Movement = tuple[str, int, str]


@dataclass(frozen=True)
class FlowGroup:
    """One demand group: O-D terminal sets plus a piecewise-constant rate.

    profile is a sorted tuple of (start_second, rate_veh_per_hr)
    breakpoints; the rate holds from each breakpoint until the next
    (the last one holds forever). The first breakpoint must sit at 0.
    """

    name: str
    origins: tuple[str, ...]
    destinations: tuple[str, ...]
    profile: tuple[tuple[float, float], ...]

    def rate_at(self, t: float) -> float:
        rate = 0.0
        for start, r in self.profile:
            if t >= start:
                rate = r
            else:
                break
        return rate

    def total_demand(self, t_end: float) -> float:
        """Exact integral of the rate profile over [0, t_end), in vehicles."""
        total = 0.0
        for k, (start, rate) in enumerate(self.profile):
            if start >= t_end:
                break
            end = self.profile[k + 1][0] if k + 1 < len(self.profile) else t_end
            total += rate / 3600.0 * (min(end, t_end) - start)
        return total


@dataclass
class RoadNetwork:
    nodes: dict[str, Node]
    links: dict[str, Link]

    def incoming(self, node_id: str) -> list[Link]:
        return [l for l in self.links.values() if l.to == node_id]

    def outgoing(self, node_id: str) -> list[Link]:
        return [l for l in self.links.values() if l.frm == node_id]


@dataclass
class PhaseTable:
    """Per agent, the ordered list of phases (each a frozenset of movements)."""

    phases: dict[int, tuple[frozenset[Movement], ...]]

    def n_actions(self, agent: int) -> int:
        return len(self.phases[agent])


@dataclass
class Scenario:
    network: RoadNetwork
    phases: PhaseTable
    flows: tuple[FlowGroup, ...]
    graph: AgentNetwork
    agent_nodes: tuple[str, ...]  # node id per agent index

    def __post_init__(self):
        self._validate()
        # fixed per-agent incoming lane ordering: links by id, lanes ascending
        order: list[tuple[tuple[str, int], ...]] = []
        for node_id in self.agent_nodes:
            lanes = []
            for link in sorted(self.network.incoming(node_id), key=lambda l: l.id):
                for lane in range(link.lanes):
                    lanes.append((link.id, lane))
            order.append(tuple(lanes))
        self.lane_order: tuple[tuple[tuple[str, int], ...], ...] = tuple(order)

    @property
    def n_agents(self) -> int:
        return len(self.agent_nodes)

    def _validate(self):
        net = self.network
        for link in net.links.values():
            if link.frm not in net.nodes or link.to not in net.nodes:
                raise ScenarioError(f"link {link.id} references unknown node")
            if link.length <= 0 or link.lanes < 1 or link.speed_limit <= 0:
                raise ScenarioError(f"link {link.id} has non-positive geometry")
        for agent, node_id in enumerate(self.agent_nodes):
            node = net.nodes.get(node_id)
            if node is None or node.kind != "intersection":
                raise ScenarioError(f"agent {agent} is not an intersection node")
            phases = self.phases.phases.get(agent)
            if not phases or len(phases) < 2:
                raise ScenarioError(f"agent {agent} needs at least 2 phases")
            all_movs = set().union(*phases)
            covered = {(m[0], m[1]) for m in all_movs}
            for link in net.incoming(node_id):
                for lane in range(link.lanes):
                    if (link.id, lane) not in covered:
                        raise ScenarioError(
                            f"lane {lane} of link {link.id} has no movement at agent {agent}"
                        )
            for mov in all_movs:
                in_link, lane, out_link = mov
                if in_link not in net.links or out_link not in net.links:
                    raise ScenarioError(f"movement {mov} references unknown link")
                if net.links[in_link].to != node_id or net.links[out_link].frm != node_id:
                    raise ScenarioError(f"movement {mov} does not pass through agent {agent}")
        for grp in self.flows:
            if any(r < 0 for _, r in grp.profile):
                raise ScenarioError(f"flow group {grp.name} has a negative rate")
            if not grp.profile or grp.profile[0][0] != 0.0:
                raise ScenarioError(f"flow group {grp.name} profile must start at t=0")
            for term in (*grp.origins, *grp.destinations):
                if term not in net.nodes or net.nodes[term].kind != "terminal":
                    raise ScenarioError(f"flow group {grp.name} endpoint {term} is not a terminal")

    # ------------------------------------------------------------- documents

    def to_doc(self) -> dict:
        phases_doc = {}
        for agent, phases in self.phases.phases.items():
            phases_doc[str(agent)] = [sorted([list(m) for m in ph]) for ph in phases]
        return {
            "format": SCENARIO_FORMAT,
            "n_agents": self.n_agents,
            "agent_nodes": list(self.agent_nodes),
            "nodes": [
                {"id": n.id, "kind": n.kind, **({"agent": n.agent} if n.agent is not None else {})}
                for n in sorted(self.network.nodes.values(), key=lambda n: n.id)
            ],
            "links": [
                {
                    "id": l.id,
                    "from": l.frm,
                    "to": l.to,
                    "length": l.length,
                    "lanes": l.lanes,
                    "speed_limit": l.speed_limit,
                }
                for l in sorted(self.network.links.values(), key=lambda l: l.id)
            ],
            "phases": phases_doc,
            "flows": [
                {
                    "name": g.name,
                    "origins": list(g.origins),
                    "destinations": list(g.destinations),
                    "profile": [list(bp) for bp in g.profile],
                }
                for g in self.flows
            ],
            "agent_edges": sorted([list(e) for e in self.graph.edges]),
        }

    def digest(self) -> str:
        payload = json.dumps(self.to_doc(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            json.dump(self.to_doc(), f, indent=1, sort_keys=True)
            f.write("\n")


def scenario_from_doc(doc: dict) -> Scenario:
    if doc.get("format") != SCENARIO_FORMAT:
        raise ScenarioError(f"unsupported scenario format {doc.get('format')!r}")
    nodes = {
        d["id"]: Node(id=d["id"], kind=d["kind"], agent=d.get("agent")) for d in doc["nodes"]
    }
    links = {
        d["id"]: Link(
            id=d["id"],
            frm=d["from"],
            to=d["to"],
            length=float(d["length"]),
            lanes=int(d["lanes"]),
            speed_limit=float(d["speed_limit"]),
        )
        for d in doc["links"]
    }
    phases = {
        int(agent): tuple(
            frozenset((m[0], int(m[1]), m[2]) for m in ph) for ph in phase_list
        )
        for agent, phase_list in doc["phases"].items()
    }
    flows = tuple(
        FlowGroup(
            name=d["name"],
            origins=tuple(d["origins"]),
            destinations=tuple(d["destinations"]),
            profile=tuple((float(t), float(r)) for t, r in d["profile"]),
        )
        for d in doc["flows"]
    )
    graph = build_agent_graph([tuple(e) for e in doc["agent_edges"]], int(doc["n_agents"]))
    return Scenario(
        network=RoadNetwork(nodes=nodes, links=links),
        phases=PhaseTable(phases=phases),
        flows=flows,
        graph=graph,
        agent_nodes=tuple(doc["agent_nodes"]),
    )


def load_scenario(path) -> Scenario:
    with open(path) as f:
        return scenario_from_doc(json.load(f))


# ---------------------------------------------------------------- grid maker


@dataclass(frozen=True)
class GridParams:
    """Geometry and demand knobs for the synthetic grid."""

    link_length: float = 200.0  # m
    arterial_lanes: int = 2
    arterial_speed: float = 20.0  # m/s
    avenue_lanes: int = 1
    avenue_speed: float = 11.0  # m/s
    peak_major: float = 1100.0  # veh/hr per member flow of the major groups
    peak_minor: float = 300.0  # veh/hr per member flow of the minor groups
    episode_seconds: float = 3600.0  # demand pattern is scaled to this horizon


# (drow, dcol) headings; row 0 is the north edge of the grid
_HEADINGS = {"E": (0, 1), "W": (0, -1), "N": (-1, 0), "S": (1, 0)}


def _turn(heading: tuple[int, int], kind: str) -> tuple[int, int]:
    dr, dc = heading
    if kind == "straight":
        return heading
    if kind == "left":
        return (-dc, dr)
    return (dc, -dr)  # right


def _ramped_profile(t0: float, peak: float, hold: float, ramp: float):
    """Two-block ramp up, hold at peak, two-block ramp down, then zero."""
    pts = [(0.0, 0.0)] if t0 > 0 else []
    pts += [
        (t0, peak / 3.0),
        (t0 + ramp / 2.0, 2.0 * peak / 3.0),
        (t0 + ramp, peak),
        (t0 + ramp + hold, 2.0 * peak / 3.0),
        (t0 + ramp + hold + ramp / 2.0, peak / 3.0),
        (t0 + 2.0 * ramp + hold, 0.0),
    ]
    return tuple(pts)


def build_grid_scenario(n: int, params: GridParams | None = None) -> Scenario:
    """n x n lattice of five-phase intersections with four demand groups.

    Arterial streets (two lanes, fast) run along the min(3, n) central
    rows; every other street is a one-lane avenue. Major demand enters
    at the west ends of the arterial rows heading east, minor demand
    at the south ends of the central avenue columns heading north;
    after the first plateau both groups reverse (swapped O-D sets).
    """
    if n < 2:
        raise ScenarioError(f"grid dimension must be >= 2, got {n}")
    params = params or GridParams()

    def inode(r, c):
        return f"i{r}_{c}"

    nodes: dict[str, Node] = {}
    for r in range(n):
        for c in range(n):
            nodes[inode(r, c)] = Node(id=inode(r, c), kind="intersection", agent=r * n + c)
        for tid in (f"t_w{r}", f"t_e{r}"):
            nodes[tid] = Node(id=tid, kind="terminal")
    for c in range(n):
        for tid in (f"t_n{c}", f"t_s{c}"):
            nodes[tid] = Node(id=tid, kind="terminal")

    first = (n - min(3, n)) // 2
    arterial_rows = set(range(first, first + min(3, n)))
    central_cols = sorted(range(first, first + min(3, n)))

    links: dict[str, Link] = {}

    def add_road(a: str, b: str, arterial: bool):
        lanes = params.arterial_lanes if arterial else params.avenue_lanes
        speed = params.arterial_speed if arterial else params.avenue_speed
        for frm, to in ((a, b), (b, a)):
            lid = f"{frm}->{to}"
            links[lid] = Link(
                id=lid, frm=frm, to=to, length=params.link_length, lanes=lanes, speed_limit=speed
            )

    for r in range(n):
        arterial = r in arterial_rows
        add_road(f"t_w{r}", inode(r, 0), arterial)
        for c in range(n - 1):
            add_road(inode(r, c), inode(r, c + 1), arterial)
        add_road(inode(r, n - 1), f"t_e{r}", arterial)
    for c in range(n):
        add_road(f"t_n{c}", inode(0, c), False)
        for r in range(n - 1):
            add_road(inode(r, c), inode(r + 1, c), False)
        add_road(inode(n - 1, c), f"t_s{c}", False)

    def side_node(r, c, heading):
        dr, dc = heading
        rr, cc = r + dr, c + dc
        if 0 <= rr < n and 0 <= cc < n:
            return inode(rr, cc)
        if rr < 0:
            return f"t_n{c}"
        if rr >= n:
            return f"t_s{c}"
        if cc < 0:
            return f"t_w{r}"
        return f"t_e{r}"

    phases: dict[int, tuple[frozenset[Movement], ...]] = {}
    for r in range(n):
        for c in range(n):
            here = inode(r, c)
            # movements per approach heading: dict turn -> Movement
            movs: dict[str, dict[str, Movement]] = {}
            for hname, heading in _HEADINGS.items():
                src = side_node(r, c, (-heading[0], -heading[1]))
                in_link = links[f"{src}->{here}"]
                approach: dict[str, Movement] = {}
                for turn in ("left", "straight", "right"):
                    dst = side_node(r, c, _turn(heading, turn))
                    out_id = f"{here}->{dst}"
                    # two-lane approaches: lane 0 turns left, lane 1 goes straight/right
                    lane = 0 if (in_link.lanes == 1 or turn == "left") else 1
                    approach[turn] = (in_link.id, lane, out_id)
                movs[hname] = approach

            def straight_right(h):
                return {movs[h]["straight"], movs[h]["right"]}

            def all_of(h):
                return set(movs[h].values())

            phases[r * n + c] = (
                frozenset(straight_right("E") | straight_right("W")),
                frozenset({movs["E"]["left"], movs["W"]["left"]}),
                frozenset(all_of("E")),
                frozenset(all_of("W")),
                frozenset(all_of("N") | all_of("S")),
            )

    scale = params.episode_seconds / 3600.0
    ramp, hold = 120.0 * scale, 900.0 * scale
    swap_t0 = ramp + hold  # reverse flows start as the first ones wind down

    def scaled(profile):
        return tuple((t, r) for t, r in profile)

    west = tuple(f"t_w{r}" for r in sorted(arterial_rows))
    east = tuple(f"t_e{r}" for r in sorted(arterial_rows))
    south = tuple(f"t_s{c}" for c in central_cols)
    north = tuple(f"t_n{c}" for c in central_cols)
    major_rate = params.peak_major * len(west)
    minor_rate = params.peak_minor * len(south)
    flows = (
        FlowGroup("F1", west, east, scaled(_ramped_profile(0.0, major_rate, hold, ramp))),
        FlowGroup("f1", south, north, scaled(_ramped_profile(0.0, minor_rate, hold, ramp))),
        FlowGroup("F2", east, west, scaled(_ramped_profile(swap_t0, major_rate, hold, ramp))),
        FlowGroup("f2", north, south, scaled(_ramped_profile(swap_t0, minor_rate, hold, ramp))),
    )

    edges = []
    for r in range(n):
        for c in range(n):
            if c + 1 < n:
                edges.append((r * n + c, r * n + c + 1))
            if r + 1 < n:
                edges.append((r * n + c, (r + 1) * n + c))
    graph = build_agent_graph(edges, n * n)

    return Scenario(
        network=RoadNetwork(nodes=nodes, links=links),
        phases=PhaseTable(phases=phases),
        flows=flows,
        graph=graph,
        agent_nodes=tuple(inode(r, c) for r in range(n) for c in range(n)),
    )
