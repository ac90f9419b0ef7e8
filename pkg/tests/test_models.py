import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbplan import _kernels as K
from gbplan.errors import NoSuchNeighbor, NonPositiveGap
from gbplan.maps import straight_road
from gbplan.models import (IdmParams, NoiseParams, PurePursuitParams, RssParams, idm_acceleration,
                           lane_change_incentive, pure_pursuit_steer, rss_min_safe_gap,
                           simulate_open_loop, step_closed_loop)
from gbplan.world import (Lateral, Longitudinal, SemanticAction, Vehicle, VehicleParams, VehicleState,
                          WorldState)

QUIET = NoiseParams(0.0, 0.0)
LK_MAI = SemanticAction(Lateral.LK, Longitudinal.MAINTAIN)


def car(vid, x, y=0.0, v=10.0, heading=0.0):
    return Vehicle(VehicleParams(vid), VehicleState(x, y, heading, v))


def idm_formula(v, v_lead, gap, p):
    s_star = p.s0 + v * p.T + v * (v - v_lead) / (2 * math.sqrt(p.a * p.b))
    return p.a * (1 - (v / p.desired_velocity) ** p.delta - (s_star / gap) ** 2)


# -- IDM ---------------------------------------------------------------------


def test_idm_free_road_equilibrium():
    for v0 in (5.0, 13.9, 30.0):
        p = IdmParams(desired_velocity=v0)
        assert abs(idm_acceleration(v0, None, None, p)) <= 1e-12


def test_idm_at_rest_is_full_accel():
    p = IdmParams()
    assert idm_acceleration(0.0, None, None, p) == p.a


def test_idm_following_closed_form():
    p = IdmParams()
    gap = p.s0 + 10.0 * p.T
    assert idm_acceleration(10.0, 10.0, gap, p) == pytest.approx(idm_formula(10.0, 10.0, gap, p), rel=1e-12)
    assert idm_acceleration(10.0, 10.0, gap, p) == pytest.approx(-p.a * (10.0 / 15.0) ** 4, rel=1e-12)


def test_idm_rejects_nonpositive_gap():
    with pytest.raises(NonPositiveGap):
        idm_acceleration(5.0, 5.0, 0.0, IdmParams())


def test_idm_clamped_to_hard_brake():
    p = IdmParams()
    assert idm_acceleration(20.0, 0.0, 0.5, p) == -p.hard_brake


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 30.0), st.floats(0.0, 30.0), st.floats(0.5, 100.0), st.floats(0.01, 5.0))
def test_idm_monotone(v, vl, gap, dv):
    p = IdmParams()
    base = idm_acceleration(v, vl, gap, p)
    # nonincreasing in v at fixed gap and fixed speed difference
    assert idm_acceleration(v + dv, vl + dv, gap, p) <= base + 1e-12
    assert idm_acceleration(v, vl, gap + dv, p) >= base - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(3.0, 40.0), st.floats(0.5, 2.5), st.floats(0.5, 4.0), st.floats(1.0, 5.0))
def test_idm_equilibrium_interaction(v0, T, a, s0):
    p = IdmParams(desired_velocity=v0, T=T, a=a, s0=s0)
    gap = s0 + v0 * T
    # free term vanishes at v0; the interaction term is exactly (s*/gap)^2 = 1
    assert idm_acceleration(v0, v0, gap, p) == pytest.approx(-a, rel=1e-12)


# -- pure pursuit ------------------------------------------------------------


def test_pure_pursuit_zero_steer_on_path():
    lane = straight_road(1, 200.0).lane(0)
    assert pure_pursuit_steer(VehicleState(50.0, 0.0, 0.0, 10.0), lane, PurePursuitParams()) == 0.0


def test_pure_pursuit_quarter_turn():
    L = 2.8
    # lookahead point straight to the left at distance 2L
    steer = K.pure_pursuit(0.0, 0.0, 0.0, 0.0, 2 * L, L, 10.0)
    assert steer == pytest.approx(math.atan(1.0), abs=1e-12)


def test_pure_pursuit_clamped():
    steer = K.pure_pursuit(0.0, 0.0, 0.0, 0.0, 5.6, 2.8, 0.6)
    assert steer == 0.6


@settings(max_examples=300, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-math.pi, math.pi),
       st.floats(-1.4, 1.4), st.floats(2.0, 30.0))
def test_pure_pursuit_matches_circle_fit(x, y, h, alpha, ld):
    L = 2.8
    tx, ty = x + ld * math.cos(h + alpha), y + ld * math.sin(h + alpha)
    # circle tangent to the heading at the pose and through the target
    n = np.array([-math.sin(h), math.cos(h)])
    d = np.array([tx - x, ty - y])
    curvature = 2.0 * float(n @ d) / float(d @ d)
    oracle = math.atan(L * curvature)
    assert K.pure_pursuit(x, y, h, tx, ty, L, 10.0) == pytest.approx(oracle, abs=1e-9)


def test_pure_pursuit_converges_on_straight_lane():
    lm = straight_road(1, 400.0)
    w = WorldState(0.0, lm, [car(0, 20.0, y=1.5, v=10.0)])
    for _ in range(15):  # 6 s
        w = step_closed_loop(w, {0: LK_MAI}, 0.4, QUIET, IdmParams(desired_velocity=10.0))
    assert abs(w.ego.state.y) < 0.1


# -- RSS ---------------------------------------------------------------------


def test_rss_at_rest():
    p = RssParams()
    assert rss_min_safe_gap(0, 0, p) == pytest.approx(0.5 * p.a_resp * p.rho ** 2
                                                      + (p.rho * p.a_resp) ** 2 / (2 * p.b_min))
    assert rss_min_safe_gap(0, 0, RssParams(a_resp=0.0)) == 0.0


def test_rss_clamped():
    assert rss_min_safe_gap(0, 50, RssParams()) == 0.0


def test_rss_closed_form():
    p = RssParams(rho=1.0, a_resp=2.0, b_min=4.0, b_max=8.0)
    # 20*1 + 0.5*2*1 + (20 + 2)^2/8 - 10^2/16
    assert rss_min_safe_gap(20, 10, p) == pytest.approx(20 + 1 + 60.5 - 6.25, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 40), st.floats(0, 40), st.floats(0.01, 10))
def test_rss_monotone(vr, vf, dv):
    p = RssParams()
    g = rss_min_safe_gap(vr, vf, p)
    assert g >= 0
    assert rss_min_safe_gap(vr + dv, vf, p) >= g
    assert rss_min_safe_gap(vr, vf + dv, p) <= g


# -- MOBIL -------------------------------------------------------------------


def test_mobil_symmetric_scene_zero_incentive():
    w = WorldState(0.0, straight_road(3), [car(0, 100.0, y=3.5)])
    inc, vetoed = lane_change_incentive(0, w, "left")
    assert inc == pytest.approx(0.0, abs=1e-12)
    assert not vetoed
    inc_r, _ = lane_change_incentive(0, w, "right")
    assert inc_r == pytest.approx(0.0, abs=1e-12)


def test_mobil_slow_leader_motivates_change():
    w = WorldState(0.0, straight_road(3), [car(0, 100.0, y=3.5, v=12.0), car(1, 115.0, y=3.5, v=4.0)])
    inc, vetoed = lane_change_incentive(0, w, "left")
    assert inc > 0 and not vetoed


def test_mobil_close_fast_follower_vetoes():
    w = WorldState(0.0, straight_road(3), [car(0, 100.0, y=3.5, v=8.0), car(1, 94.2, y=7.0, v=20.0)])
    _, vetoed = lane_change_incentive(0, w, "left")
    assert vetoed


def test_mobil_needs_neighbor():
    w = WorldState(0.0, straight_road(1), [car(0, 100.0)])
    with pytest.raises(NoSuchNeighbor):
        lane_change_incentive(0, w, "left")


# -- closed-loop stepping ----------------------------------------------------


def test_step_equilibrium():
    w = WorldState(0.0, straight_road(1), [car(0, 50.0, v=10.0)])
    w2 = step_closed_loop(w, {0: LK_MAI}, 0.4, QUIET, IdmParams(desired_velocity=10.0))
    assert w2.ego.state.velocity == pytest.approx(10.0, abs=1e-6)
    assert w2.ego.state.y == pytest.approx(0.0, abs=1e-9)
    assert w2.ego.state.x == pytest.approx(54.0, abs=1e-6)


def test_step_lane_change_approaches_target_lane():
    lm = straight_road(2, 400.0)
    w = WorldState(0.0, lm, [car(0, 20.0, v=10.0)])
    lcl = SemanticAction(Lateral.LCL, Longitudinal.MAINTAIN)
    errs = [3.5 - w.ego.state.y]
    for _ in range(20):
        act = lcl if w.lane_of(0) == 0 else LK_MAI
        w = step_closed_loop(w, {0: act}, 0.4, QUIET, IdmParams(desired_velocity=10.0))
        errs.append(3.5 - w.ego.state.y)
    errs = np.array(errs)
    first = int(np.argmax(errs < 0))
    # monotone approach up to the first crossing of the target centerline
    assert np.all(np.diff(errs[:first + 1]) < 0)
    # linearised pure pursuit has damping 1/sqrt(2): overshoot exp(-pi) of the step
    assert -errs.min() <= 3.5 * math.exp(-math.pi) + 0.01
    assert abs(errs[-1]) < 0.1


@pytest.mark.parametrize("extra", [0.0, 2.0, 10.0])
def test_follower_behind_braking_leader(extra):
    rss = RssParams()
    v = 12.0
    gap0 = rss_min_safe_gap(v, v, rss) + extra
    lm = straight_road(1, 600.0)
    w = WorldState(0.0, lm, [car(0, 50.0, v=v), car(1, 50.0 + 4.8 + gap0, v=v)])
    dec = SemanticAction(Lateral.LK, Longitudinal.DECELERATE)
    v_start = v
    for _ in range(25):
        w = step_closed_loop(w, {0: LK_MAI, 1: dec}, 0.4, QUIET)
        gap = w.vehicle(1).state.x - w.ego.state.x - 4.8
        assert gap > 0
    assert w.ego.state.velocity < v_start


def test_substep_count_changes_little():
    lm = straight_road(2, 600.0)
    w0 = WorldState(0.0, lm, [car(0, 20.0, v=8.0), car(1, 45.0, v=6.0), car(2, 30.0, y=3.5, v=10.0)])
    lcl = SemanticAction(Lateral.LCL, Longitudinal.ACCELERATE)
    out = []
    for sub in (2, 4):
        w = w0
        for _ in range(20):
            act = lcl if w.lane_of(0) == 0 else SemanticAction(Lateral.LK, Longitudinal.ACCELERATE)
            w = step_closed_loop(w, {0: act}, 0.4, QUIET, substeps=sub)
        out.append(np.array([[v.state.x, v.state.y] for v in w.vehicles]))
    assert np.max(np.hypot(*(out[0] - out[1]).T)) < 0.05


def test_step_is_deterministic_under_noise():
    w = WorldState(0.0, straight_road(2), [car(0, 20.0), car(1, 40.0, y=3.5)])
    noise = NoiseParams(0.5, 0.02, seed=7)
    a = step_closed_loop(w, {0: LK_MAI}, 0.4, noise)
    b = step_closed_loop(w, {0: LK_MAI}, 0.4, noise)
    assert [v.state for v in a.vehicles] == [v.state for v in b.vehicles]


# -- open loop ---------------------------------------------------------------


def test_open_loop_parallel_constant_gap():
    w = WorldState(0.0, straight_road(2), [car(0, 50.0), car(1, 60.0, y=3.5)])
    ro = simulate_open_loop(w, 1, Lateral.LK, [LK_MAI] * 4)
    xs = ro.frames[:, 1, K.X] - ro.frames[:, 0, K.X]
    assert np.allclose(xs, xs[0], atol=1e-9)
    assert not ro.rss_violation and not ro.collision


def test_open_loop_insertion_ahead_is_unsafe():
    w = WorldState(0.0, straight_road(2), [car(0, 50.0), car(1, 60.0, y=3.5)])
    acc = SemanticAction(Lateral.LK, Longitudinal.ACCELERATE)
    ro = simulate_open_loop(w, 1, Lateral.LCR, [acc] * 4)
    assert ro.rss_violation


def test_open_loop_steady_follow_is_safe():
    w = WorldState(0.0, straight_road(1), [car(0, 50.0), car(1, 80.0)])
    ro = simulate_open_loop(w, 1, Lateral.LK, [LK_MAI] * 4)
    assert not ro.rss_violation and not ro.collision
    assert len(ro.times) == 21 and np.allclose(np.diff(ro.times), 0.4)


def test_open_loop_infeasible_hypothesis():
    w = WorldState(0.0, straight_road(1), [car(0, 50.0), car(1, 80.0)])
    with pytest.raises(NoSuchNeighbor):
        simulate_open_loop(w, 1, Lateral.LCL, [LK_MAI] * 4)
