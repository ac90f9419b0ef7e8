"""Vehicle models and forward simulation.

IDM for the longitudinal direction, pure pursuit for steering, RSS for the
safe following distance and MOBIL for lane-change incentives.  The closed-loop
and open-loop simulators below are thin wrappers around the compiled kernels.
"""

import hashlib
import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import NoSuchNeighbor, NonPositiveGap, PathExhausted
from .world import (Lateral, Longitudinal, SemanticAction, Vehicle, VehicleState,
                    WorldState, frenet_project, target_lane_for)


@dataclass(frozen=True)
class IdmParams:
    desired_velocity: float = 15.0
    T: float = 1.2
    a: float = 2.0
    b: float = 2.5
    s0: float = 2.0
    delta: float = 4.0
    hard_brake: float = 8.0

    def __post_init__(self):
        for name in ("desired_velocity", "T", "a", "b", "s0", "delta", "hard_brake"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IDM parameter {name} must be positive")


@dataclass(frozen=True)
class PurePursuitParams:
    lookahead_base: float = 5.0
    lookahead_gain: float = 0.5
    wheelbase: float = 2.8
    max_steer: float = 0.6

    def __post_init__(self):
        if not self.lookahead_base > 0 or self.lookahead_gain < 0:
            raise ValueError("lookahead_base must be positive and lookahead_gain nonnegative")


@dataclass(frozen=True)
class RssParams:
    rho: float = 0.3
    a_resp: float = 1.0
    b_min: float = 5.0
    b_max: float = 8.0

    def __post_init__(self):
        if not (self.rho > 0 and 0 < self.b_min <= self.b_max) or self.a_resp < 0:
            raise ValueError("need rho > 0, 0 < b_min <= b_max, a_resp >= 0")

    def as_array(self):
        return np.array([self.rho, self.a_resp, self.b_min, self.b_max])


@dataclass(frozen=True)
class NoiseParams:
    accel_std: float = 0.2
    steer_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.accel_std < 0 or self.steer_std < 0:
            raise ValueError("noise stds must be nonnegative")

    def as_array(self):
        return np.array([self.accel_std, self.steer_std])


@dataclass(frozen=True)
class ActionParams:
    """How longitudinal actions turn into desired velocities."""

    accel_offset: float = 5.0
    decel_offset: float = 5.0
    cap_factor: float = 1.2
    decel_ramp: float = 1.2

    def as_array(self):
        return np.array([self.accel_offset, self.decel_offset, self.cap_factor, self.decel_ramp])


def stream_seed(*parts) -> int:
    """Stable 32-bit seed from arbitrary hashable content."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=4)
    return int.from_bytes(h.digest(), "little")


def unit_normals(seed, shape):
    """Standard normal draws for one noise stream."""
    return np.random.default_rng(seed).standard_normal(shape)


# --------------------------------------------------------------------------
# point models


def idm_acceleration(v, v_lead, gap, p: IdmParams):
    """IDM acceleration, clamped to ``[-p.hard_brake, p.a]``."""
    has_lead = v_lead is not None
    if has_lead and gap <= 0:
        raise NonPositiveGap(f"gap {gap} m to leader")
    return K.idm(float(v), p.desired_velocity, has_lead, float(gap) if has_lead else K.INF,
                 float(v_lead) if has_lead else 0.0, p.T, p.a, p.b, p.s0, p.delta, p.hard_brake)


def rss_min_safe_gap(v_rear, v_front, p: RssParams):
    return K.rss_gap(float(v_rear), float(v_front), p.rho, p.a_resp, p.b_min, p.b_max)


def pure_pursuit_steer(state: VehicleState, lane, p: PurePursuitParams, lane_map=None,
                       lateral_offset=0.0):
    """Steering angle that drives ``state`` onto ``lane`` (shifted by ``lateral_offset``)."""
    pose = frenet_project((state.x, state.y), lane)
    ld = p.lookahead_base + p.lookahead_gain * state.velocity
    s = pose.s + ld
    cur = lane
    while s > cur.length:
        if cur.successor is None or lane_map is None:
            raise PathExhausted(f"lane {cur.id} ends within the lookahead distance")
        s -= cur.length
        cur = lane_map.lane(cur.successor)
    pt, tan = cur.point_at(s)
    pt = pt + lateral_offset * np.array([-tan[1], tan[0]])
    return K.pure_pursuit(state.x, state.y, state.heading, pt[0], pt[1], p.wheelbase, p.max_steer)


# --------------------------------------------------------------------------
# packing worlds into kernel arrays


def param_row(vp, idm: IdmParams, pp: PurePursuitParams, v0=None):
    return [vp.length, vp.width, vp.wheelbase, idm.desired_velocity if v0 is None else v0,
            idm.T, idm.a, idm.b, idm.s0, idm.delta, pp.lookahead_base, pp.lookahead_gain,
            pp.max_steer, idm.hard_brake]


def pack_world(world: WorldState, order, idm: IdmParams = IdmParams(),
               pp: PurePursuitParams = PurePursuitParams(), vdes=None):
    """State/param arrays for the vehicles in ``order`` (row i = order[i]).

    ``vdes`` maps id -> desired velocity; the default is the current speed,
    which is what an observer can infer about another driver.
    """
    n = len(order)
    st = np.zeros((n, K.NSTATE))
    prm = np.zeros((n, K.NPARAM))
    loc = world.located
    for i, vid in enumerate(order):
        v = world.vehicle(vid)
        s = v.state
        li, ls, ld, sta = loc[vid]
        st[i, [K.X, K.Y, K.TH, K.V, K.A, K.ST]] = (s.x, s.y, s.heading, s.velocity,
                                                   s.acceleration, s.steering)
        st[i, [K.LANE, K.TGT, K.S, K.D, K.TS, K.TD, K.STA]] = (li, li, ls, ld, ls, ld, sta)
        st[i, K.SEG] = -1
        st[i, K.TSEG] = -1
        want = s.velocity if vdes is None else vdes.get(vid, s.velocity)
        st[i, K.VDES] = want
        prm[i] = param_row(v.params, idm, pp, want)
    for i in range(n):
        K.reproject(world.lane_map.geo, st, i)
    return st, prm


def unpack_world(world: WorldState, order, st, time):
    vehicles = []
    for i, vid in enumerate(order):
        v = world.vehicle(vid)
        kappa = math.tan(st[i, K.ST]) / v.params.wheelbase
        vehicles.append(Vehicle(v.params, VehicleState(
            float(st[i, K.X]), float(st[i, K.Y]), float(st[i, K.TH]), float(max(st[i, K.V], 0.0)),
            float(st[i, K.A]), float(st[i, K.ST]), float(kappa))))
    # vehicles outside ``order`` are carried over unchanged
    moved = set(order)
    vehicles += [v for v in world.vehicles if v.id not in moved]
    return WorldState(time, world.lane_map, vehicles, world.ego_id)


@dataclass(frozen=True)
class SimSettings:
    """Everything the internal forward simulation needs besides the world."""

    step: float = 0.4
    substeps: int = 4
    idm: IdmParams = IdmParams()
    pp: PurePursuitParams = PurePursuitParams()
    rss: RssParams = RssParams()
    noise: NoiseParams = NoiseParams()
    actions: ActionParams = ActionParams()

    @property
    def dt(self):
        return self.step / self.substeps


class PackedWorld:
    """A world packed once per planning cycle; row 0 is always the ego."""

    def __init__(self, world: WorldState, order, sim: SimSettings = SimSettings(), vdes=None):
        if order[0] != world.ego_id:
            raise ValueError("the ego must be the first packed vehicle")
        self.world = world
        self.order = list(order)
        self.row = {vid: i for i, vid in enumerate(self.order)}
        self.st, self.prm = pack_world(world, self.order, sim.idm, sim.pp, vdes)
        self.geo = world.lane_map.geo
        lanes = self.st[:, K.LANE].astype(np.int64)
        li = self.geo[2]
        # target lane index per row and lateral intention (LK, LCL, LCR)
        self.targets = np.column_stack([lanes, li[lanes, K.GI_LEFT], li[lanes, K.GI_RIGHT]])
        self.targets = np.where(self.targets < 0, lanes[:, None], self.targets)

    @property
    def n(self):
        return len(self.order)

    def lane_index(self, vid):
        return int(self.st[self.row[vid], K.LANE])

    def target_for(self, vid, lateral):
        """Lane index ``lateral`` leads to; the current lane if there is none."""
        return int(self.targets[self.row[vid], int(lateral)])


def lane_change_incentive(vehicle, world: WorldState, direction, politeness=0.3,
                          idm: IdmParams = IdmParams(), b_safe=4.0):
    """MOBIL incentive and safety veto for ``vehicle`` changing towards ``direction``.

    ``direction`` is ``Lateral.LCL``/``LCR`` (or ``"left"``/``"right"``).
    Every vehicle's desired velocity is taken as its current speed.
    """
    if isinstance(direction, str):
        direction = {"left": Lateral.LCL, "right": Lateral.LCR}[direction]
    lane_id = world.lane_of(vehicle)
    if world.lane_map.neighbor(lane_id, direction) is None:
        raise NoSuchNeighbor(f"lane {lane_id} has no {direction.name} neighbor")
    order = [vehicle] + [v for v in world.ids if v != vehicle]
    st, prm = pack_world(world, order, idm)
    inc, vetoed, _ = K.mobil(world.lane_map.geo, st, prm, st[:, K.VDES].copy(), len(order), 0,
                             int(direction), politeness, b_safe)
    return float(inc), bool(vetoed)


# --------------------------------------------------------------------------
# rollouts


@dataclass
class Rollout:
    """Recorded simulation: ``frames[k]`` is the (n, NSTATE) array at ``times[k]``.

    ``min_gap``/``rss_shortfall`` describe vehicle ``order[0]`` (the ego)
    against every vehicle sharing a lane with it.
    """

    lane_map: object
    order: list
    base: WorldState
    times: np.ndarray
    frames: np.ndarray
    min_gap: np.ndarray
    rss_shortfall: np.ndarray
    collision: bool
    ego_collision: bool
    step: float = 0.4

    def world_at(self, k) -> WorldState:
        return unpack_world(self.base, self.order, self.frames[k], float(self.times[k]))

    @property
    def states(self):
        return [self.world_at(k) for k in range(len(self.times))]

    @property
    def ego_velocity(self):
        return self.frames[:, 0, K.V]

    @property
    def rss_violation(self):
        return bool(np.any(self.rss_shortfall[1:] > 0))


def _as_target(world, vid, behavior):
    lane = world.lane_of(vid)
    if isinstance(behavior, SemanticAction):
        lat = behavior.lateral
    else:
        lat = Lateral(behavior)
    tl = world.lane_map.neighbor(lane, lat)
    return world.lane_map.index[lane if tl is None else tl]


def _target_speed(v, lon, speed_limit, ap: ActionParams):
    if lon == Longitudinal.ACCELERATE:
        return min(v + ap.accel_offset, ap.cap_factor * speed_limit)
    if lon == Longitudinal.DECELERATE:
        return max(v - ap.decel_offset, 0.0)
    return v


def step_closed_loop(world: WorldState, behavior_assignment, dt, noise: NoiseParams = NoiseParams(),
                     idm: IdmParams = IdmParams(), pp: PurePursuitParams = PurePursuitParams(),
                     actions: ActionParams = ActionParams(), substeps=4):
    """Advance every vehicle by ``dt`` with interacting IDM + pure pursuit.

    ``behavior_assignment`` maps id -> SemanticAction or lateral intention; a
    bare intention keeps the current speed as the desired velocity.  Lane
    targets are resolved from each vehicle's current lane, so a lane change
    spanning several calls should keep passing the lane-change action only
    until the vehicle is attributed to the new lane.
    """
    order = list(world.ids)
    lm = world.lane_map
    vdes = {}
    for vid in order:
        b = behavior_assignment.get(vid, Lateral.LK)
        v = world.vehicle(vid).state.velocity
        if isinstance(b, SemanticAction):
            limit = lm.lane(world.lane_of(vid)).speed_limit
            vdes[vid] = _target_speed(v, b.longitudinal, limit, actions)
        else:
            vdes[vid] = v
    st, prm = pack_world(world, order, idm, pp, vdes)
    for i, vid in enumerate(order):
        tl = _as_target(world, vid, behavior_assignment.get(vid, Lateral.LK))
        if tl != int(st[i, K.TGT]):
            K.set_target(lm.geo, st, i, tl)
    n = len(order)
    false = np.zeros(n, dtype=np.bool_)
    z = unit_normals(stream_seed(noise.seed, round(world.time, 6)), (substeps, n, 2))
    K.advance(lm.geo, st, prm, n, dt / substeps, substeps, false, false, false,
              noise.as_array(), z)
    return unpack_world(world, order, st, world.time + dt)


def _sequence_schedule(actions, horizon, dt):
    """Per-integration-step lateral and longitudinal command codes (read-only)."""
    key = tuple((int(a.lateral), int(a.longitudinal), a.duration) for a in actions)
    return _schedule(key, horizon, dt)


@lru_cache(maxsize=4096)
def _schedule(key, horizon, dt):
    steps = int(round(horizon / dt))
    lat = np.zeros(steps, dtype=np.int64)
    lon = np.zeros(steps, dtype=np.int64)
    t_end = np.cumsum([d for _, _, d in key])
    k = 0
    for i in range(steps):
        t = (i + 0.5) * dt
        while k < len(key) - 1 and t > t_end[k]:
            k += 1
        lat[i] = key[k][0]
        lon[i] = key[k][1]
    lat.flags.writeable = False
    lon.flags.writeable = False
    return lat, lon


def simulate_open_loop(world: WorldState, vehicle, hypothesis, ego_policy, horizon=8.0,
                       step=0.4, substeps=4, noise: NoiseParams = NoiseParams(0.0, 0.0),
                       idm: IdmParams = IdmParams(), pp: PurePursuitParams = PurePursuitParams(),
                       rss: RssParams = RssParams(), actions: ActionParams = ActionParams()):
    """Ego and one hypothesised agent, neither reacting to the other.

    The agent keeps its speed and steers towards the lane its hypothesis
    implies; the ego runs ``ego_policy`` (a sequence of SemanticActions) on a
    free road.  Annotations are ego-relative.
    """
    lm = world.lane_map
    hypothesis = Lateral(hypothesis)
    target_lane_for(hypothesis, world.lane_of(vehicle), lm)
    acts = list(getattr(ego_policy, "actions", ego_policy))
    order = [world.ego_id, vehicle]
    st, prm = pack_world(world, order, idm, pp)
    dt = step / substeps
    lat, lon = _sequence_schedule(acts, horizon, dt)
    tg = np.array([_as_target(world, world.ego_id, acts[0]), _as_target(world, vehicle, hypothesis)],
                  dtype=np.int64)
    nrec = len(lat) // substeps
    frames = np.zeros((nrec + 1, 2, K.NSTATE))
    ann = np.zeros((nrec + 1, 4))
    seed = stream_seed(noise.seed, "open", vehicle, int(hypothesis), tuple(a.code for a in acts))
    z = unit_normals(seed, (len(lat), 2, 2))
    eh, oh = K.rollout_one(lm.geo, st, prm, 2, lat, lon, tg, np.array([False, True]),
                           np.array([True, True]), z, noise.as_array(), dt, substeps,
                           rss.as_array(), actions.as_array(), frames, ann)
    return Rollout(lm, order, world, world.time + step * np.arange(nrec + 1), frames,
                   ann[:, 0].copy(), ann[:, 1].copy(), bool(eh or oh), bool(eh), step)
