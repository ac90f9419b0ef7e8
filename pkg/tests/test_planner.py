from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from _scenes import random_beliefs, random_world
from gbplan import _kernels as K
from gbplan.belief import IntentionBelief
from gbplan.cfb import MAP_ONLY, Scenario
from gbplan.dcp_tree import PolicySequence
from gbplan.maps import straight_road
from gbplan.planner import (Planner, PlannerConfig, action_distance, candidate_sequences, evaluate_policy,
                            plan_once, replan_loop, rollout_reward, rollout_scenario)
from gbplan.scenes import blocker_scene, cut_in_scene
from gbplan.sim_env import EgoSpec, Environment, ScenarioConfig
from gbplan.world import Lateral, Longitudinal, SemanticAction, Vehicle, VehicleParams, VehicleState, WorldState

CFG = PlannerConfig()
LK_MAI = SemanticAction(Lateral.LK, Longitudinal.MAINTAIN)


def seq(*pairs):
    return PolicySequence([SemanticAction(lat, lon) for lat, lon in pairs])


def const(lat, lon):
    return seq(*[(lat, lon)] * 4)


def fake_rollout(v, shortfall=0.0, collision=False, steps=20):
    frames = np.zeros((steps + 1, 1, K.NSTATE))
    frames[:, 0, K.V] = v
    return SimpleNamespace(frames=frames, rss_shortfall=np.full(steps + 1, shortfall),
                           ego_collision=collision)


def empty_world(v=10.0, n_lanes=2, limit=15.0):
    lm = straight_road(n_lanes, 600.0, speed_limit=limit)
    return WorldState(0.0, lm, [Vehicle(VehicleParams(0), VehicleState(50.0, 0.0, 0.0, v))], 0)


# -- reward ------------------------------------------------------------------


def test_reward_vanishes_at_desired_speed():
    s = const(Lateral.LK, Longitudinal.MAINTAIN)
    r = rollout_scenario(empty_world(), Scenario({}, 1.0), s)
    assert r.frames.shape[0] == 21  # t = 0 plus 8 s at 0.4 s
    assert rollout_reward(r, 10.0, CFG, action_distance(s, s)) == pytest.approx(0.0, abs=1e-9)
    ys = r.frames[:, 0, K.Y]
    assert np.all(np.abs(ys) < 1e-9)
    assert np.allclose(r.frames[:, 0, K.V], 10.0)


def test_weighted_sum():
    s = const(Lateral.LK, Longitudinal.MAINTAIN)
    ev = evaluate_policy(s, [fake_rollout(9.0), fake_rollout(7.0)], [0.7, 0.3], CFG, v_desired=10.0)
    assert ev.rewards == pytest.approx([-1.0, -3.0])
    assert ev.weighted_reward == pytest.approx(-1.6)


def test_safety_term_and_risky_penalty():
    s = const(Lateral.LK, Longitudinal.MAINTAIN)
    ev = evaluate_policy(s, [fake_rollout(10.0, shortfall=0.5)], [1.0], CFG, v_desired=10.0)
    assert ev.weighted_reward == pytest.approx(-2.0 * 0.5 - 100.0)


def test_collision_dominates():
    world = empty_world(10.0)
    free = [rollout_scenario(world, Scenario({}, 1.0), s) for s in candidate_sequences(world, LK_MAI, CFG)]
    worst_free = min(rollout_reward(r, 15.0, CFG, 4) for r in free)
    for r in free:
        hit = replace(r, ego_collision=True, collision=True)
        assert rollout_reward(hit, 15.0, CFG, 0) < worst_free


def test_consistency_term():
    s = const(Lateral.LK, Longitudinal.MAINTAIN)
    other = const(Lateral.LK, Longitudinal.ACCELERATE)
    r = [fake_rollout(9.0)]
    same = evaluate_policy(s, r, [1.0], CFG, last_best=s, v_desired=10.0)
    diff = evaluate_policy(s, r, [1.0], CFG, last_best=other, v_desired=10.0)
    assert same.weighted_reward >= diff.weighted_reward
    assert same.weighted_reward - diff.weighted_reward == pytest.approx(4 * CFG.w_consistency)


def test_bad_config():
    with pytest.raises(ValueError):
        PlannerConfig(mode="XDM")
    with pytest.raises(ValueError):
        PlannerConfig(horizon=7.0)
    with pytest.raises(ValueError):
        PlannerConfig(sim_resolution=0.3)
    with pytest.raises(ValueError):
        PlannerConfig(w_safety=-1.0)


def test_config_json_round_trip():
    cfg = PlannerConfig(mode="edm", seed=4, w_safety=3.0)
    assert PlannerConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        PlannerConfig.from_json({"bogus": 1})


# -- rollouts ----------------------------------------------------------------


def test_blocker_rollout_changes_lane_later():
    world, beliefs, _ = blocker_scene()
    s = PolicySequence([LK_MAI] + [SemanticAction(Lateral.LCL, Longitudinal.ACCELERATE)] * 3)
    r = rollout_scenario(world, Scenario({1: Lateral.LK, 2: Lateral.LK}, 1.0), s, beliefs=beliefs)
    assert not r.collision
    ego = r.frames[:, 0]
    blocker = r.frames[:, 1]
    assert ego[-1, K.Y] == pytest.approx(3.5, abs=0.3)
    assert ego[-1, K.X] > blocker[-1, K.X]


def test_insertion_against_acceleration_is_flagged():
    world, beliefs, _ = cut_in_scene()
    r = rollout_scenario(world, Scenario({1: Lateral.LCR}, 1.0), const(Lateral.LK, Longitudinal.ACCELERATE))
    assert r.rss_shortfall.max() > 0
    safe = rollout_scenario(world, Scenario({1: Lateral.LK}, 1.0), const(Lateral.LK, Longitudinal.ACCELERATE))
    assert safe.rss_shortfall.max() == 0


# -- plan_once ---------------------------------------------------------------


@pytest.mark.parametrize("v,lon", [(10.0, Longitudinal.ACCELERATE), (15.0, Longitudinal.MAINTAIN)])
def test_empty_road_keeps_lane(v, lon):
    world = empty_world(v)
    res = plan_once(world, {}, LK_MAI, CFG)
    assert all(a.lateral == Lateral.LK for a in res.best.actions)
    assert res.best.actions[1].longitudinal == lon
    again = plan_once(world, {}, LK_MAI, CFG)
    assert again.best == res.best and again.trace == res.trace
    assert len(res.trace) == 21


def frozen(seed, n_max=10):
    rng = np.random.default_rng(seed)
    world = random_world(rng, n_max=n_max, n_lanes=3)
    return world, random_beliefs(rng, world)


@pytest.mark.parametrize("seed", range(3))
def test_mode_containment(seed):
    world, beliefs = frozen(seed)
    ongoing = SemanticAction(Lateral.LK, Longitudinal.MAINTAIN)
    tree = plan_once(world, beliefs, ongoing, replace(CFG, mode="EDM"))
    flat = plan_once(world, beliefs, ongoing, replace(CFG, mode="MPDM"))
    tree_codes = {ev.sequence.codes for ev in tree.evaluations}
    same_root = [ev for ev in flat.evaluations if ev.sequence.actions[0].same_template(ongoing)]
    assert same_root and all(ev.sequence.codes in tree_codes for ev in same_root)
    assert tree.best_evaluation.weighted_reward >= max(ev.weighted_reward for ev in same_root) - 1e-9


def test_edm_matches_eudm_without_branching():
    world, _ = frozen(7)
    beliefs = {v.id: IntentionBelief(v.id, 1.0, 0.0, 0.0) for v in world.agents}
    a = plan_once(world, beliefs, LK_MAI, replace(CFG, mode="EUDM"))
    b = plan_once(world, beliefs, LK_MAI, replace(CFG, mode="EDM"))
    assert all(len(ev.scenarios) == 1 and ev.scenarios[0].origin == MAP_ONLY for ev in a.evaluations)
    assert a.best == b.best
    assert [ev.weighted_reward for ev in a.evaluations] == [ev.weighted_reward for ev in b.evaluations]


def test_weight_scaling_keeps_selection():
    world, beliefs = frozen(3)
    base = plan_once(world, beliefs, LK_MAI, CFG)
    c = 3.7
    scaled = replace(CFG, w_efficiency=c, w_safety=2 * c, w_consistency=0.3 * c, risky_penalty=100 * c)
    assert plan_once(world, beliefs, LK_MAI, scaled).best == base.best


def test_parallel_matches_serial():
    world, beliefs = frozen(11)
    a = plan_once(world, beliefs, LK_MAI, replace(CFG, workers=1))
    b = plan_once(world, beliefs, LK_MAI, replace(CFG, workers=4))
    assert a.best == b.best and a.trace == b.trace
    assert [ev.weighted_reward for ev in a.evaluations] == [ev.weighted_reward for ev in b.evaluations]


# -- replanning loop ---------------------------------------------------------


def empty_env():
    cfg = ScenarioConfig("straight", EgoSpec(lane=0, s=20.0, velocity=10.0), duration=10.0)
    return Environment(cfg)


def test_forty_cycles_switch_once():
    log = replan_loop(empty_env(), CFG, lambda env, n: n >= 40)
    durations = [e["ongoing"][2] for e in log]
    switches = sum(1 for a, b in zip(durations, durations[1:]) if b > a)
    assert len(log) == 40 and switches == 1


def test_zero_cycles():
    assert replan_loop(empty_env(), CFG, lambda env, n: True) == []


def test_planner_tracks_lane_change_target():
    world, beliefs, ongoing = blocker_scene()
    p = Planner(replace(CFG, replan_dt=0.2))
    p.ongoing = ongoing
    res = p.plan(world)
    assert res.best.actions[0].lateral == Lateral.LK
