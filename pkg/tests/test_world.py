import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbplan.errors import MapError, NoSuchNeighbor, ProjectionOutOfRange
from gbplan.maps import double_merge_map, ring_map, straight_road
from gbplan.world import (Lane, LaneMap, Lateral, Longitudinal, SemanticAction, Vehicle, VehicleParams,
                          VehicleState, WorldState, frenet_project, reconstruct, surrounding_vehicles,
                          target_lane_for)


def car(vid, x, y=0.0, v=10.0, length=4.8):
    return Vehicle(VehicleParams(vid, length=length), VehicleState(x, y, 0.0, v))


def arc_lane(radius=30.0, spacing=1.0):
    n = int(math.ceil(0.5 * math.pi * radius / spacing)) + 1
    ang = np.linspace(0.0, 0.5 * math.pi, n)
    return Lane(0, np.column_stack([radius * np.cos(ang), radius * np.sin(ang)]))


# -- projection --------------------------------------------------------------


def test_project_on_centerline_midpoint():
    lane = straight_road(1, 100.0).lane(0)
    pose = frenet_project((50.0, 0.0), lane, heading=0.3)
    assert pose.s == pytest.approx(50.0)
    assert pose.d == 0.0
    assert pose.heading_error == pytest.approx(0.3)


def test_project_left_offset():
    lane = straight_road(1, 100.0).lane(0)
    pose = frenet_project((10.0, 1.5), lane)
    assert (pose.s, pose.d) == pytest.approx((10.0, 1.5))


def test_project_arc_matches_dense_sampling():
    lane = arc_lane()
    rng = np.random.default_rng(3)
    # oracle: 10^4 points sampled on the polyline itself
    t = np.linspace(0.0, lane.length, 10_000)
    pts = np.array([lane.point_at(s)[0] for s in t])
    for _ in range(20):
        ang = rng.uniform(0.1, 0.5 * math.pi - 0.1)
        r = 30.0 + rng.uniform(-3.0, 3.0)
        p = np.array([r * math.cos(ang), r * math.sin(ang)])
        pose = frenet_project(p, lane)
        k = np.argmin(np.hypot(*(pts - p).T))
        assert pose.s == pytest.approx(t[k], abs=lane.length / 10_000 + 1e-3)
        # counter-clockwise arc: points outside the circle are to the right
        assert abs(pose.d) == pytest.approx(np.hypot(*(pts[k] - p)), abs=1e-3)
        assert math.copysign(1.0, pose.d) == (1.0 if r < 30.0 else -1.0)


def test_project_out_of_range():
    lane = straight_road(1, 100.0).lane(0)
    with pytest.raises(ProjectionOutOfRange):
        frenet_project((50.0, 12.0), lane)
    with pytest.raises(ProjectionOutOfRange):
        frenet_project((105.0, 0.0), lane)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 100.0), st.floats(-5.0, 5.0))
def test_round_trip_straight(s, d):
    lane = straight_road(1, 100.0).lane(0)
    p = np.array([s, d])
    assert np.allclose(reconstruct(frenet_project(p, lane), lane), p, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.02, 0.5 * math.pi - 0.02), st.floats(-0.01, 0.01))
def test_round_trip_arc(ang, dr):
    # points on the true arc, a few mm off the polyline chords
    lane = arc_lane()
    p = np.array([(30.0 + dr) * math.cos(ang), (30.0 + dr) * math.sin(ang)])
    assert np.allclose(reconstruct(frenet_project(p, lane), lane), p, atol=1e-3)


# -- map checks --------------------------------------------------------------


def test_builtin_maps_are_symmetric():
    for lm in (straight_road(3), ring_map(), double_merge_map()):
        for lane in lm.lanes:
            if lane.left is not None:
                assert lm.lane(lane.left).right == lane.id
            if lane.right is not None:
                assert lm.lane(lane.right).left == lane.id


def test_asymmetric_neighbors_rejected():
    a = Lane(0, [[0, 0], [1, 0]], left=1)
    b = Lane(1, [[0, 3.5], [1, 3.5]])
    with pytest.raises(MapError):
        LaneMap([a, b])


def test_coarse_spacing_rejected():
    with pytest.raises(MapError):
        Lane(0, [[0, 0], [5, 0]])


def test_unflagged_cycle_rejected():
    a = Lane(0, [[0, 0], [1, 0]], successor=1)
    b = Lane(1, [[1, 0], [2, 0]], successor=0)
    with pytest.raises(MapError):
        LaneMap([a, b])


def test_map_json_round_trip(tmp_path):
    lm = double_merge_map()
    path = tmp_path / "dm.json"
    lm.save(path)
    again = LaneMap.load(path)
    assert again.to_json() == json.loads(json.dumps(lm.to_json()))


# -- neighborhood ------------------------------------------------------------


def test_single_vehicle_has_no_neighbors():
    w = WorldState(0.0, straight_road(1), [car(0, 50.0)])
    assert surrounding_vehicles(w, 0, 0) == {"leader": None, "follower": None}


def test_bumper_gap():
    w = WorldState(0.0, straight_road(1), [car(0, 10.0, length=4.0), car(1, 40.0, length=4.0)])
    assert surrounding_vehicles(w, 0, 0)["leader"] == (1, pytest.approx(26.0))
    assert surrounding_vehicles(w, 1, 0)["follower"] == (0, pytest.approx(26.0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(5.0, 395.0), min_size=2, max_size=50, unique=True))
def test_neighbors_match_sort_oracle(xs):
    xs = sorted(set(round(x, 3) for x in xs))
    if len(xs) < 2:
        return
    w = WorldState(0.0, straight_road(1, 400.0), [car(i, x) for i, x in enumerate(xs)])
    order = np.argsort(xs)
    for rank, i in enumerate(order):
        got = surrounding_vehicles(w, int(i), 0)
        if rank + 1 < len(order):
            j = int(order[rank + 1])
            assert got["leader"][0] == j
            assert got["leader"][1] == pytest.approx(xs[j] - xs[i] - 4.8, abs=1e-6)
        else:
            assert got["leader"] is None
        if rank > 0:
            assert got["follower"][0] == int(order[rank - 1])
        else:
            assert got["follower"] is None


# -- lane targets ------------------------------------------------------------


def test_target_lane_for():
    lm = straight_road(3)
    assert target_lane_for(SemanticAction(Lateral.LK, Longitudinal.MAINTAIN), 2, lm) == 2
    assert target_lane_for(SemanticAction(Lateral.LCL, Longitudinal.MAINTAIN), 0, lm) == 1
    with pytest.raises(NoSuchNeighbor):
        target_lane_for(SemanticAction(Lateral.LCR, Longitudinal.MAINTAIN), 0, lm)


def test_action_duration_must_be_positive():
    with pytest.raises(ValueError):
        SemanticAction(Lateral.LK, Longitudinal.MAINTAIN, 0.0)
