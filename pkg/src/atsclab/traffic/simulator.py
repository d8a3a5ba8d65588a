"""Deterministic discrete-time link-queue traffic simulator.

Vehicles traverse each link at its speed limit (point-queue model),
then stack in a per-lane vertical queue at the stop line. Green
movements discharge the head of queue at the saturation flow, blocked
when the receiving link is at storage capacity. A phase switch opens a
yellow interval during which only movements green in both the old and
the new phase keep discharging.

One control step advances step_seconds one-second ticks; observations
and rewards are taken after the last tick (post-decision). Identical
(scenario, seed, action sequence) produce bit-identical state.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .scenario import Scenario

WAVE_RANGE_M = 50.0  # approaching vehicles within this distance count toward wave


class SimConfigError(ValueError):
    """Raised for unusable simulator parameter combinations."""


class InvalidActionError(ValueError):
    """Raised when a controller sends an out-of-range phase index."""


@dataclass(frozen=True)
class SimParams:
    step_seconds: int = 5  # control interval
    yellow_seconds: int = 2  # transition interval after a phase switch
    saturation_flow: float = 0.5  # veh/s/lane discharge rate
    vehicle_space: float = 7.5  # m of lane per stored vehicle
    reward_coef: float = 0.2  # veh/s weight of head wait in the step reward


@dataclass
class Vehicle:
    vid: int
    route: tuple[str, ...]
    idx: int  # position in route
    spawn_time: float  # entry into the network
    entry: float  # entry onto the current link
    lane: int
    arrival: float  # entry + free-flow travel time of the current link
    queued: bool = False
    join_time: float = 0.0


class Observation(NamedTuple):
    wave: np.ndarray  # veh per incoming lane
    wait: np.ndarray  # s per incoming lane


class MetricsSnapshot(NamedTuple):
    avg_queue: float  # veh per intersection
    avg_delay: float  # mean queue age over queued vehicles (s/veh), nan if none
    avg_speed: float  # m/s over in-network vehicles, nan if empty
    completed: int  # cumulative finished trips
    accumulation: int  # vehicles currently in the network
    avg_trip_delay: float  # mean (actual - free flow) over finished trips, nan if none
    max_trip_delay: float


METRICS_CSV_HEADER = "step,avg_queue,avg_delay,avg_speed,completed,accumulation"


def metrics_csv_row(step: int, snap: MetricsSnapshot) -> str:
    return (
        f"{step},{snap.avg_queue!r},{snap.avg_delay!r},{snap.avg_speed!r},"
        f"{snap.completed},{snap.accumulation}"
    )


class TrafficSim:
    """Mutable simulation state over an immutable Scenario."""

    def __init__(self, scenario: Scenario, params: SimParams | None = None,
                 record_spawns: bool = False):
        self.scenario = scenario
        self.params = params or SimParams()
        if self.params.yellow_seconds >= self.params.step_seconds:
            raise SimConfigError("yellow time must be shorter than the control interval")
        net = scenario.network
        self.storage: dict[str, int] = {}
        for link in net.links.values():
            cap = math.floor(link.length / self.params.vehicle_space)
            if cap < 1:
                raise SimConfigError(f"link {link.id} stores no vehicles (too short)")
            self.storage[link.id] = cap

        # static lookups, all in deterministic orders
        self.lane_keys: list[tuple[str, int]] = []
        for link in sorted(net.links.values(), key=lambda l: l.id):
            if net.nodes[link.to].kind == "intersection":
                for lane in range(link.lanes):
                    self.lane_keys.append((link.id, lane))
        self.agent_of_node = {nid: i for i, nid in enumerate(scenario.agent_nodes)}
        # union of phase movements per agent, and lanes allowed per (link, out_link)
        self.allowed_lanes: dict[tuple[str, str], tuple[int, ...]] = {}
        self.phase_movs = scenario.phases.phases
        for agent, phases in self.phase_movs.items():
            for mov in set().union(*phases):
                in_link, lane, out_link = mov
                key = (in_link, out_link)
                lanes = set(self.allowed_lanes.get(key, ()))
                lanes.add(lane)
                self.allowed_lanes[key] = tuple(sorted(lanes))
        self._route_cache: dict[tuple[str, str], tuple[str, ...]] = {}
        self._ff_time: dict[tuple[str, ...], float] = {}
        self.record_spawns = record_spawns
        self.force_all_red = False  # test hook: hold every movement at red
        self.reset(seed=0)

    # ------------------------------------------------------------------ reset

    def reset(self, seed: int):
        """Empty network, clock 0, all intersections on phase 0, seeded RNG."""
        self.clock = 0
        self.rng = np.random.default_rng(seed)
        self.vehicles: dict[int, Vehicle] = {}
        self.approach: dict[tuple[str, int], deque] = {k: deque() for k in self.lane_keys}
        self.queues: dict[tuple[str, int], deque] = {k: deque() for k in self.lane_keys}
        self.credit: dict[tuple[str, int], float] = {k: 0.0 for k in self.lane_keys}
        # final links (into terminals) hold free-flowing vehicles only
        self.exit_counts: dict[str, int] = {
            l.id: 0
            for l in self.scenario.network.links.values()
            if self.scenario.network.nodes[l.to].kind == "terminal"
        }
        self.exit_deques: dict[str, deque] = {lid: deque() for lid in self.exit_counts}
        self.cur_phase = [0] * self.scenario.n_agents
        self.pending_phase = [0] * self.scenario.n_agents
        self.yellow_left = [0] * self.scenario.n_agents
        self.since_switch = [0] * self.scenario.n_agents
        self.pending_spawns: deque[Vehicle] = deque()
        self.next_vid = 0
        self.spawned_total = 0
        self.completed_total = 0
        self.trip_delay_sum = 0.0
        self.trip_delay_max = 0.0
        self.spawn_log: list[tuple[int, str, str, int]] = []
        return self._observe()

    # ------------------------------------------------------------------ step

    def step(self, joint_action):
        """Apply one phase decision per agent, advance step_seconds ticks."""
        if len(joint_action) != self.scenario.n_agents:
            raise InvalidActionError("joint action must cover every agent")
        for i, a in enumerate(joint_action):
            a = int(a)
            if not 0 <= a < len(self.phase_movs[i]):
                raise InvalidActionError(
                    f"agent {i} got phase {a}, has {len(self.phase_movs[i])} phases"
                )
            if a != self.cur_phase[i]:
                self.pending_phase[i] = a
                self.yellow_left[i] = self.params.yellow_seconds
                self.since_switch[i] = 0
                if self.yellow_left[i] == 0:
                    self.cur_phase[i] = a

        step_completed = 0
        step_spawned = 0
        for _ in range(self.params.step_seconds):
            spawned, completed = self._tick()
            step_spawned += spawned
            step_completed += completed

        obs = self._observe()
        rewards = np.array(
            [self.local_reward(i, self.params.reward_coef) for i in range(self.scenario.n_agents)]
        )
        info = {
            "spawned": self.spawned_total,
            "completed": self.completed_total,
            "in_network": len(self.vehicles),
            "pending": len(self.pending_spawns),
            "step_spawned": step_spawned,
            "step_completed": step_completed,
        }
        return obs, rewards, info

    def _tick(self):
        c = self.clock
        spawned = 0
        completed = 0

        # (a) demand: retry blocked spawns first, then draw new arrivals
        still_blocked = deque()
        while self.pending_spawns:
            v = self.pending_spawns.popleft()
            v.entry = float(c)
            v.spawn_time = float(c)
            if self._try_enter_link(v, v.route[0]):
                self._register_spawn(v)
                spawned += 1
            else:
                still_blocked.append(v)
        self.pending_spawns = still_blocked
        for grp in self.scenario.flows:
            rate = grp.rate_at(float(c))
            if rate <= 0.0:
                continue
            if self.rng.random() < rate / 3600.0:
                origin = grp.origins[int(self.rng.integers(len(grp.origins)))]
                dest = grp.destinations[int(self.rng.integers(len(grp.destinations)))]
                v = self._make_vehicle(origin, dest, float(c))
                if self._try_enter_link(v, v.route[0]):
                    self._register_spawn(v)
                    spawned += 1
                else:
                    self.pending_spawns.append(v)

        # (b) free-flow arrivals join their lane queue; final-link arrivals finish
        horizon = c + 1
        for key in self.lane_keys:
            dq = self.approach[key]
            while dq and dq[0][0] <= horizon:
                arrival, vid = dq.popleft()
                veh = self.vehicles[vid]
                veh.queued = True
                veh.join_time = arrival
                self.queues[key].append(vid)
        for lid, dq in self.exit_deques.items():
            while dq and dq[0][0] <= horizon:
                arrival, vid = dq.popleft()
                self._complete_trip(self.vehicles.pop(vid), arrival)
                self.exit_counts[lid] -= 1
                completed += 1

        # (c) signal control and queue discharge
        cap = max(1.0, self.params.saturation_flow)
        for agent in range(self.scenario.n_agents):
            if self.force_all_red:
                eff = frozenset()
            elif self.yellow_left[agent] > 0:
                eff = self.phase_movs[agent][self.cur_phase[agent]] & self.phase_movs[agent][
                    self.pending_phase[agent]
                ]
                self.yellow_left[agent] -= 1
                if self.yellow_left[agent] == 0:
                    self.cur_phase[agent] = self.pending_phase[agent]
            else:
                eff = self.phase_movs[agent][self.cur_phase[agent]]
            self.since_switch[agent] += 1
            for key in self.scenario.lane_order[agent]:
                q = self.queues[key]
                if not q:
                    self.credit[key] = 0.0
                    continue
                head = self.vehicles[q[0]]
                mov = (key[0], key[1], head.route[head.idx + 1])
                if mov not in eff:
                    self.credit[key] = 0.0
                    continue
                self.credit[key] = min(cap, self.credit[key] + self.params.saturation_flow)
                while q and self.credit[key] >= 1.0:
                    head = self.vehicles[q[0]]
                    mov = (key[0], key[1], head.route[head.idx + 1])
                    if mov not in eff:
                        break
                    prev_lane, prev_entry, prev_arrival = head.lane, head.entry, head.arrival
                    head.idx += 1
                    head.entry = float(c + 1)
                    head.lane = 0
                    if not self._try_enter_link(head, head.route[head.idx]):
                        head.idx -= 1
                        head.lane, head.entry, head.arrival = prev_lane, prev_entry, prev_arrival
                        break
                    head.queued = False
                    q.popleft()
                    self.credit[key] -= 1.0

        self.clock = c + 1
        return spawned, completed

    # ------------------------------------------------------------- internals

    def _make_vehicle(self, origin: str, dest: str, now: float) -> Vehicle:
        route = self._route(origin, dest)
        v = Vehicle(
            vid=self.next_vid,
            route=route,
            idx=0,
            spawn_time=now,
            entry=now,
            lane=0,
            arrival=0.0,
        )
        self.next_vid += 1
        return v

    def _register_spawn(self, v: Vehicle):
        self.vehicles[v.vid] = v
        self.spawned_total += 1
        if self.record_spawns:
            self.spawn_log.append((int(v.spawn_time), v.route[0], v.route[-1], v.vid))

    def inject_vehicle(self, origin: str, dest: str) -> int:
        """Test helper: force one vehicle into the network right now."""
        v = self._make_vehicle(origin, dest, float(self.clock))
        if not self._try_enter_link(v, v.route[0]):
            raise SimConfigError("injection blocked: origin link is full")
        self._register_spawn(v)
        return v.vid

    def _lane_count(self, link_id: str, lane: int) -> int:
        key = (link_id, lane)
        if key in self.approach:
            return len(self.approach[key]) + len(self.queues[key])
        return 0

    def _try_enter_link(self, veh: Vehicle, link_id: str) -> bool:
        link = self.scenario.network.links[link_id]
        if link_id in self.exit_counts:  # final link into a terminal
            if self.exit_counts[link_id] >= self.storage[link_id] * link.lanes:
                return False
            veh.lane = 0
            veh.arrival = veh.entry + link.travel_time
            self.exit_counts[link_id] += 1
            self.exit_deques[link_id].append((veh.arrival, veh.vid))
            return True
        nxt = veh.route[veh.idx + 1] if veh.idx + 1 < len(veh.route) else None
        if nxt is None:
            lanes = tuple(range(link.lanes))
        else:
            lanes = self.allowed_lanes.get((link_id, nxt), ())
            if not lanes:
                raise SimConfigError(f"no lane of {link_id} allows turning onto {nxt}")
        best = None
        for lane in lanes:
            n = self._lane_count(link_id, lane)
            if n < self.storage[link_id] and (best is None or n < best[1]):
                best = (lane, n)
        if best is None:
            return False
        veh.lane = best[0]
        veh.arrival = veh.entry + link.travel_time
        self.approach[(link_id, best[0])].append((veh.arrival, veh.vid))
        return True

    def _complete_trip(self, veh: Vehicle, finish: float):
        self.completed_total += 1
        delay = (finish - veh.spawn_time) - self._free_flow_time(veh.route)
        self.trip_delay_sum += delay
        self.trip_delay_max = max(self.trip_delay_max, delay)

    def _free_flow_time(self, route: tuple[str, ...]) -> float:
        t = self._ff_time.get(route)
        if t is None:
            links = self.scenario.network.links
            t = sum(links[lid].travel_time for lid in route)
            self._ff_time[route] = t
        return t

    def _route(self, origin: str, dest: str) -> tuple[str, ...]:
        """Shortest free-flow-time path; terminals only as endpoints."""
        cached = self._route_cache.get((origin, dest))
        if cached is not None:
            return cached
        net = self.scenario.network
        out_links: dict[str, list] = {}
        for link in sorted(net.links.values(), key=lambda l: l.id):
            out_links.setdefault(link.frm, []).append(link)
        best: dict[str, float] = {origin: 0.0}
        back: dict[str, str] = {}
        heap = [(0.0, origin)]
        while heap:
            d, node = heapq.heappop(heap)
            if node == dest:
                break
            if d > best.get(node, math.inf):
                continue
            if node != origin and net.nodes[node].kind == "terminal":
                continue  # terminals are sources/sinks, never waypoints
            for link in out_links.get(node, ()):
                nd = d + link.travel_time
                if nd < best.get(link.to, math.inf):
                    best[link.to] = nd
                    back[link.to] = link.id
                    heapq.heappush(heap, (nd, link.to))
        if dest not in back:
            raise SimConfigError(f"no route from {origin} to {dest}")
        route = []
        node = dest
        while node != origin:
            lid = back[node]
            route.append(lid)
            node = net.links[lid].frm
        route.reverse()
        out = tuple(route)
        self._route_cache[(origin, dest)] = out
        return out

    # --------------------------------------------------------- measurements

    def measure_wave(self, link_id: str, lane: int) -> int:
        """Queued vehicles plus free-flowing ones within 50 m of the stop line."""
        key = (link_id, lane)
        count = len(self.queues[key])
        speed = self.scenario.network.links[link_id].speed_limit
        threshold = self.clock + WAVE_RANGE_M / speed
        for arrival, _ in self.approach[key]:
            if arrival <= threshold:
                count += 1
            else:
                break
        return count

    def measure_wait(self, link_id: str, lane: int) -> float:
        """Cumulative stopped time of the head vehicle (0 for an empty queue)."""
        q = self.queues[(link_id, lane)]
        if not q:
            return 0.0
        return float(self.clock) - self.vehicles[q[0]].join_time

    def queue_len(self, link_id: str, lane: int) -> int:
        return len(self.queues[(link_id, lane)])

    def _observe(self):
        obs = []
        for agent in range(self.scenario.n_agents):
            lanes = self.scenario.lane_order[agent]
            wave = np.array([float(self.measure_wave(*k)) for k in lanes])
            wait = np.array([self.measure_wait(*k) for k in lanes])
            obs.append(Observation(wave=wave, wait=wait))
        return obs

    def _raw_reward_terms(self, agent: int) -> tuple[float, float]:
        queue = 0.0
        wait = 0.0
        for key in self.scenario.lane_order[agent]:
            queue += self.queue_len(*key)
            wait += self.measure_wait(*key)
        return (queue, wait)

    def local_reward(self, agent: int, coef: float) -> float:
        """-(total queue + coef * total head wait) over incoming lanes, veh units."""
        queue, wait = self._raw_reward_terms(agent)
        return -(queue + coef * wait)

    def snapshot_metrics(self) -> MetricsSnapshot:
        total_queued = 0
        age_sum = 0.0
        for key in self.lane_keys:
            q = self.queues[key]
            total_queued += len(q)
            for vid in q:
                age_sum += float(self.clock) - self.vehicles[vid].join_time
        n_free = 0
        speed_sum = 0.0
        links = self.scenario.network.links
        for key in self.lane_keys:
            m = len(self.approach[key])
            n_free += m
            speed_sum += m * links[key[0]].speed_limit
        for lid, dq in self.exit_deques.items():
            m = len(dq)
            n_free += m
            speed_sum += m * links[lid].speed_limit
        in_net = len(self.vehicles)
        return MetricsSnapshot(
            avg_queue=total_queued / self.scenario.n_agents,
            avg_delay=(age_sum / total_queued) if total_queued else float("nan"),
            avg_speed=(speed_sum / in_net) if in_net else float("nan"),
            completed=self.completed_total,
            accumulation=in_net,
            avg_trip_delay=(self.trip_delay_sum / self.completed_total)
            if self.completed_total
            else float("nan"),
            max_trip_delay=self.trip_delay_max if self.completed_total else float("nan"),
        )

    # -------------------------------------------------------------- identity

    def state_doc(self) -> dict:
        """Full JSON-compatible snapshot, exact enough to resume from."""
        return {
            "clock": self.clock,
            "rng": _rng_doc(self.rng),
            "vehicles": [
                {
                    "vid": v.vid,
                    "route": list(v.route),
                    "idx": v.idx,
                    "spawn_time": v.spawn_time,
                    "entry": v.entry,
                    "lane": v.lane,
                    "arrival": v.arrival,
                    "queued": v.queued,
                    "join_time": v.join_time,
                }
                for v in sorted(self.vehicles.values(), key=lambda v: v.vid)
            ],
            "approach": {f"{k[0]}|{k[1]}": [[a, vid] for a, vid in dq]
                         for k, dq in self.approach.items() if dq},
            "queues": {f"{k[0]}|{k[1]}": list(dq) for k, dq in self.queues.items() if dq},
            "credit": {f"{k[0]}|{k[1]}": c for k, c in self.credit.items() if c},
            "exit_deques": {lid: [[a, vid] for a, vid in dq]
                            for lid, dq in self.exit_deques.items() if dq},
            "cur_phase": list(self.cur_phase),
            "pending_phase": list(self.pending_phase),
            "yellow_left": list(self.yellow_left),
            "since_switch": list(self.since_switch),
            "pending_spawns": [
                {"route": list(v.route), "spawn_time": v.spawn_time, "vid": v.vid}
                for v in self.pending_spawns
            ],
            "next_vid": self.next_vid,
            "spawned_total": self.spawned_total,
            "completed_total": self.completed_total,
            "trip_delay_sum": self.trip_delay_sum,
            "trip_delay_max": self.trip_delay_max,
        }

    def load_state_doc(self, doc: dict):
        self.reset(seed=0)
        self.clock = int(doc["clock"])
        _rng_restore(self.rng, doc["rng"])
        for d in doc["vehicles"]:
            self.vehicles[int(d["vid"])] = Vehicle(
                vid=int(d["vid"]),
                route=tuple(d["route"]),
                idx=int(d["idx"]),
                spawn_time=float(d["spawn_time"]),
                entry=float(d["entry"]),
                lane=int(d["lane"]),
                arrival=float(d["arrival"]),
                queued=bool(d["queued"]),
                join_time=float(d["join_time"]),
            )

        def key_of(s):
            lid, lane = s.rsplit("|", 1)
            return (lid, int(lane))

        for s, items in doc["approach"].items():
            self.approach[key_of(s)] = deque((float(a), int(v)) for a, v in items)
        for s, vids in doc["queues"].items():
            self.queues[key_of(s)] = deque(int(v) for v in vids)
        for s, c in doc["credit"].items():
            self.credit[key_of(s)] = float(c)
        for lid, items in doc["exit_deques"].items():
            self.exit_deques[lid] = deque((float(a), int(v)) for a, v in items)
            self.exit_counts[lid] = len(self.exit_deques[lid])
        self.cur_phase = [int(x) for x in doc["cur_phase"]]
        self.pending_phase = [int(x) for x in doc["pending_phase"]]
        self.yellow_left = [int(x) for x in doc["yellow_left"]]
        self.since_switch = [int(x) for x in doc["since_switch"]]
        self.pending_spawns = deque(
            Vehicle(
                vid=int(d["vid"]),
                route=tuple(d["route"]),
                idx=0,
                spawn_time=float(d["spawn_time"]),
                entry=float(d["spawn_time"]),
                lane=0,
                arrival=0.0,
            )
            for d in doc["pending_spawns"]
        )
        self.next_vid = int(doc["next_vid"])
        self.spawned_total = int(doc["spawned_total"])
        self.completed_total = int(doc["completed_total"])
        self.trip_delay_sum = float(doc["trip_delay_sum"])
        self.trip_delay_max = float(doc["trip_delay_max"])

    def digest(self) -> str:
        payload = json.dumps(self.state_doc(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def _rng_doc(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": int(state["state"]["state"]),
        "inc": int(state["state"]["inc"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def _rng_restore(rng: np.random.Generator, doc: dict):
    rng.bit_generator.state = {
        "bit_generator": doc["bit_generator"],
        "state": {"state": int(doc["state"]), "inc": int(doc["inc"])},
        "has_uint32": int(doc["has_uint32"]),
        "uinteger": int(doc["uinteger"]),
    }
