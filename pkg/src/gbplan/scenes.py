"""Small hand-built scenes used by the demos and the behavioral tests.

Each builder returns ``(world, beliefs, ongoing)`` ready for ``plan_once``.
The ongoing action has one replanning period left, so the first decision is
free to differ from it.
"""

from .belief import IntentionBelief
from .maps import straight_road
from .world import Lateral, Longitudinal, SemanticAction, Vehicle, VehicleParams, VehicleState, WorldState

LANE_WIDTH = 3.5


def _car(vid, lane, x, v):
    return Vehicle(VehicleParams(vid), VehicleState(x, LANE_WIDTH * lane, 0.0, v))


def _fresh_ongoing(replan_dt=0.2):
    return SemanticAction(Lateral.LK, Longitudinal.MAINTAIN, replan_dt)


def blocker_scene(ego_v=12.0, blocker_dx=0.0, blocker_v=7.0, leader_dx=50.0, leader_v=3.0,
                  replan_dt=0.2):
    """Slow leader ahead in the ego lane, a slower blocker alongside in the left lane.

    Changing left right away runs into the blocker; keeping the lane until the
    blocker has been passed and then changing left gets around the leader.
    Vehicles: 0 ego (lane 0), 1 blocker (lane 1), 2 leader (lane 0).
    """
    lm = straight_road(2, 600.0, speed_limit=15.0)
    cars = [_car(0, 0, 50.0, ego_v), _car(1, 1, 50.0 + blocker_dx, blocker_v),
            _car(2, 0, 50.0 + leader_dx, leader_v)]
    world = WorldState(0.0, lm, cars, 0)
    beliefs = {1: IntentionBelief(1, 1.0, 0.0, 0.0), 2: IntentionBelief(2, 1.0, 0.0, 0.0)}
    return world, beliefs, _fresh_ongoing(replan_dt)


def cut_in_scene(ego_v=12.0, agent_dx=25.0, agent_v=6.0, p_insert=0.45, replan_dt=0.2):
    """A slower car ahead in the left lane that may or may not merge in front of the ego.

    The intention is uncertain: ``p_insert`` on a right lane change, the rest
    on keeping its lane.  Vehicles: 0 ego (lane 0), 1 agent (lane 1).
    """
    lm = straight_road(2, 600.0, speed_limit=15.0)
    cars = [_car(0, 0, 50.0, ego_v), _car(1, 1, 50.0 + agent_dx, agent_v)]
    world = WorldState(0.0, lm, cars, 0)
    beliefs = {1: IntentionBelief(1, 1.0 - p_insert, 0.0, p_insert)}
    return world, beliefs, _fresh_ongoing(replan_dt)
