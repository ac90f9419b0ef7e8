import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbplan.belief import (BeliefConfig, IntentionBelief, extract_features, map_intention,
                           target_distribution, update_belief)
from gbplan.maps import straight_road
from gbplan.models import IdmParams, idm_acceleration
from gbplan.world import Lateral, Vehicle, VehicleParams, VehicleState, WorldState

CFG = BeliefConfig()


def car(vid, x, y=0.0, v=10.0, heading=0.0):
    return Vehicle(VehicleParams(vid), VehicleState(x, y, heading, v))


def lone(n_lanes=3, lane=1, **kw):
    return WorldState(0.0, straight_road(n_lanes), [car(0, 100.0, y=3.5 * lane, **kw)])


def softmax(x, tau):
    z = np.exp((np.asarray(x) - np.max(x)) / tau)
    return z / z.sum()


beliefs = st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)).filter(lambda t: sum(t) > 1e-6)


# -- features ----------------------------------------------------------------


def test_lone_vehicle_on_single_lane():
    f = extract_features(lone(1, 0), 0)
    assert f.left is None and f.right is None
    assert f.incentive_left is None and f.incentive_right is None


def test_drift_trend():
    v = 10.0
    f = extract_features(lone(3, 1, v=v, heading=math.asin(0.3 / v)), 0)
    assert f.lateral_offset_trend == pytest.approx(0.3, abs=1e-9)


def test_slow_leader_incentive_matches_hand_mobil():
    w = WorldState(0.0, straight_road(3), [car(0, 100.0, y=3.5, v=12.0), car(1, 120.0, y=3.5, v=4.0)])
    f = extract_features(w, 0)
    # alone in the left lane: free road at the desired speed, so only the ego's own gain counts
    idm = IdmParams(desired_velocity=12.0)
    a_stay = idm_acceleration(12.0, 4.0, 20.0 - 4.8, idm)
    a_left = idm_acceleration(12.0, None, None, idm)
    assert f.incentive_left == pytest.approx(a_left - a_stay, rel=1e-9)
    assert f.incentive_left > 0


# -- update rule -------------------------------------------------------------


def test_empty_road_fixed_point_is_lk_dominant():
    f = extract_features(lone(), 0)
    # LK: bias + rss bonus; each side: zero incentive + rss bonus
    oracle = softmax([CFG.lk_bias + CFG.w_rss, CFG.w_rss, CFG.w_rss], CFG.temperature)
    b = IntentionBelief(0, 1 / 3, 1 / 3, 1 / 3)
    for _ in range(200):
        b = update_belief(b, f, 0.4)
    assert np.allclose(b.probs, oracle, atol=1e-9)
    assert map_intention(b) == Lateral.LK


def test_absent_left_lane_is_exactly_zero():
    f = extract_features(lone(2, 1), 0)
    b = update_belief(IntentionBelief(0, 0.4, 0.3, 0.3), f, 0.05)
    assert b.p_lcl == 0.0
    assert b.probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_sustained_left_drift_wins():
    w = lone()
    f = replace(extract_features(w, 0), lateral_offset_trend=0.5)
    b = IntentionBelief.from_probs(0, target_distribution(extract_features(w, 0)))
    for _ in range(40):  # 2 s at 20 Hz
        b = update_belief(b, f, 0.05)
    assert map_intention(b) == Lateral.LCL


@settings(max_examples=200, deadline=None)
@given(beliefs, st.floats(-1.0, 1.0), st.floats(0.01, 1.0), st.integers(1, 3), st.integers(0, 2))
def test_update_keeps_normalization(p, trend, dt, n_lanes, lane):
    lane = min(lane, n_lanes - 1)
    f = replace(extract_features(lone(n_lanes, lane), 0), lateral_offset_trend=trend)
    p = np.array(p) / sum(p)
    b = update_belief(IntentionBelief.from_probs(0, p), f, dt)
    assert b.probs.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(b.probs >= 0)
    if f.left is None:
        assert b.p_lcl == 0.0
    if f.right is None:
        assert b.p_lcr == 0.0


@settings(max_examples=50, deadline=None)
@given(beliefs, st.floats(-1.0, 1.0))
def test_constant_features_converge(p, trend):
    f = replace(extract_features(lone(), 0), lateral_offset_trend=trend)
    b = IntentionBelief.from_probs(0, np.array(p) / sum(p))
    # one forward-simulation step per iteration
    for _ in range(100):
        nb = update_belief(b, f, 0.4)
        step = np.abs(nb.probs - b.probs).sum()
        b = nb
    assert step < 1e-6


# -- MAP ---------------------------------------------------------------------


def test_map_intention_examples():
    assert map_intention(IntentionBelief(0, 0.8, 0.1, 0.1)) == Lateral.LK
    assert map_intention(IntentionBelief(0, 1 / 3, 1 / 3, 1 / 3)) == Lateral.LK
    assert map_intention(IntentionBelief(0, 0.2, 0.4, 0.4)) == Lateral.LCL


def test_map_intention_random_oracle():
    rng = np.random.default_rng(0)
    for p in rng.dirichlet(np.ones(3), size=1000):
        best = max(range(3), key=lambda i: (p[i], -i))
        assert int(map_intention(IntentionBelief.from_probs(0, p))) == best


@settings(max_examples=200, deadline=None)
@given(beliefs, st.floats(1e-3, 1e3))
def test_map_intention_scale_invariant(p, c):
    p = np.array(p)
    assert map_intention(p) == map_intention(c * p)
