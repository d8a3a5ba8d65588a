import json

import pytest

from atsclab.traffic import (
    GridParams,
    ScenarioError,
    build_grid_scenario,
    scenario_from_doc,
)


def test_grid_5x5_shape():
    s = build_grid_scenario(5)
    assert s.n_agents == 25
    assert all(len(p) == 5 for p in s.phases.phases.values())
    # interior agents have 4 lattice neighbors
    assert len(s.graph.neighbors(12)) == 4
    assert s.graph.distance(0, 24) == 8.0


def test_grid_2x2_shape():
    s = build_grid_scenario(2)
    assert s.n_agents == 4
    assert all(len(p) == 5 for p in s.phases.phases.values())
    assert all(len(s.graph.neighbors(i)) == 2 for i in range(4))


def test_grid_rejects_n_below_2():
    with pytest.raises(ScenarioError, match=">= 2"):
        build_grid_scenario(1)


def test_arterials_are_central_rows():
    s = build_grid_scenario(5)
    # row 1 is arterial: two lanes at 20 m/s; row 0 is an avenue
    assert s.network.links["i1_0->i1_1"].lanes == 2
    assert s.network.links["i1_0->i1_1"].speed_limit == 20.0
    assert s.network.links["i0_0->i0_1"].lanes == 1
    assert s.network.links["i0_0->i0_1"].speed_limit == 11.0
    # columns are avenues
    assert s.network.links["i0_0->i1_0"].lanes == 1


def test_flow_integral_matches_per_second_oracle():
    s = build_grid_scenario(3)
    t_end = 3600.0
    for grp in s.flows:
        oracle = sum(grp.rate_at(float(t)) / 3600.0 for t in range(int(t_end)))
        assert abs(grp.total_demand(t_end) - oracle) < 1e-9
    # closed form for the major group: ramp thirds (2 * 60 s each side) + 900 s hold
    major = s.flows[0]
    peak = 3 * 1100.0
    expected = peak / 3600.0 * (60 / 3 + 2 * 60 / 3 + 900 + 2 * 60 / 3 + 60 / 3)
    assert abs(major.total_demand(t_end) - expected) < 1e-9


def test_flow_groups_follow_swap_pattern():
    s = build_grid_scenario(5)
    names = [g.name for g in s.flows]
    assert names == ["F1", "f1", "F2", "f2"]
    f1, f2 = s.flows[0], s.flows[2]
    assert f1.origins == f2.destinations
    assert f1.destinations == f2.origins
    assert f1.rate_at(0.0) > 0.0
    assert f2.rate_at(0.0) == 0.0
    # F2 picks up while F1 winds down
    assert f2.rate_at(1100.0) > 0.0
    assert f1.rate_at(3500.0) == 0.0


def test_every_lane_covered_and_every_movement_in_a_phase():
    s = build_grid_scenario(3)
    for agent in range(s.n_agents):
        phases = s.phases.phases[agent]
        all_movs = set().union(*phases)
        covered = {(m[0], m[1]) for m in all_movs}
        assert set(s.lane_order[agent]) == covered
        for ph in phases:
            assert ph  # no empty phase


def test_lane_order_is_sorted_and_stable():
    s = build_grid_scenario(3)
    again = build_grid_scenario(3)
    assert s.lane_order == again.lane_order
    for lanes in s.lane_order:
        assert lanes == tuple(sorted(lanes))


def test_json_roundtrip_preserves_digest(tmp_path):
    s = build_grid_scenario(3, GridParams(peak_major=900.0))
    path = tmp_path / "grid.json"
    s.save(path)
    with open(path) as f:
        doc = json.load(f)
    back = scenario_from_doc(doc)
    assert back.digest() == s.digest()
    assert back.n_agents == s.n_agents
    assert back.lane_order == s.lane_order


def test_doc_rejects_bad_format():
    with pytest.raises(ScenarioError, match="format"):
        scenario_from_doc({"format": "something-else"})
