"""Interactive traffic environment for closed-loop episodes.

Agents drive with their own IDM + MOBIL + pure pursuit controllers whose
parameters are drawn per agent, plus their own control noise.  They do not
know how the ego plans.  The ego replays the planner's latest state trace.
Every step appends one JSON-serialisable frame to the episode log; the log
is a superset of the replay format read by ``world.read_log``.
"""

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from .maps import double_merge_map, ring_map, straight_road
from .metrics import BenchmarkMetrics, Thresholds, compute_metrics, frame_flags
from .models import IdmParams, NoiseParams, param_row, stream_seed
from .planner import Planner, PlannerConfig, _from_plain, _to_plain, replan_loop
from .world import LaneMap, Vehicle, VehicleParams, VehicleState, WorldState, frame_from_world

BUILTIN_MAPS = {"ring": ring_map, "double_merge": double_merge_map, "straight": straight_road}


def load_map(source) -> LaneMap:
    """A builtin map name (``ring``, ``double_merge``, ``straight``) or a JSON map path."""
    if isinstance(source, LaneMap):
        return source
    if source in BUILTIN_MAPS:
        return BUILTIN_MAPS[source]()
    return LaneMap.load(source)


@dataclass
class AgentSpec:
    lane: int
    s: float
    velocity: float
    # drawn from the scenario seed when left as None
    desired_velocity: Optional[float] = None
    aggressiveness: Optional[float] = None


@dataclass
class EgoSpec:
    lane: int
    s: float
    velocity: float
    id: int = 0


@dataclass(frozen=True)
class TrafficParams:
    """Agent controller ranges and traffic flow."""

    # every drawn parameter is nominal * U(1 - spread, 1 + spread)
    spread: float = 0.3
    # nominal desired speed as a fraction of the lane limit
    speed_factor: float = 1.0
    # standstill gap 3.5 m so that even the shortest drawn gap stays above 2 m
    idm: IdmParams = IdmParams(s0=3.5)
    politeness: float = 0.3
    threshold: float = 0.2
    b_safe: float = 4.0
    keep_right: float = 0.1
    # distance over which a vehicle in an ending lane grows urgent about leaving it
    urgency_range: float = 150.0
    # urgency beyond which a vehicle merges regardless of the braking it imposes
    force_urgency: float = 0.7
    decision_period: float = 0.5
    cooldown: float = 3.0
    accel_noise: float = 0.2
    steer_noise: float = 0.01
    # vehicles per second per entry lane (open maps)
    inflow: float = 0.0
    entry_lanes: tuple = ()
    spawn_gap: float = 25.0
    substep: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "entry_lanes", tuple(self.entry_lanes))


@dataclass
class ScenarioConfig:
    map: str
    ego: EgoSpec
    agents: list = field(default_factory=list)
    planner: PlannerConfig = PlannerConfig()
    traffic: TrafficParams = TrafficParams()
    duration: float = 60.0
    seed: int = 0
    # builtin agent layout regenerated from the seed ("double_merge", "ring"); "" keeps ``agents``
    layout: str = ""
    # keyword arguments of the layout generator (density, n_agents)
    layout_args: dict = field(default_factory=dict)
    label: str = ""
    thresholds: Thresholds = Thresholds()

    @property
    def name(self):
        return self.label or str(self.map)

    def to_json(self):
        doc = _to_plain(self)
        doc["ego"] = vars(self.ego).copy()
        doc["agents"] = [vars(a).copy() for a in self.agents]
        doc["traffic"]["entry_lanes"] = list(self.traffic.entry_lanes)
        return doc

    @classmethod
    def from_json(cls, doc):
        doc = dict(doc)
        try:
            ego = EgoSpec(**doc.pop("ego"))
            agents = [AgentSpec(**a) for a in doc.pop("agents", [])]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scenario: {exc}") from None
        planner = _from_plain(PlannerConfig, doc.pop("planner", {}))
        traffic = _from_plain(TrafficParams, doc.pop("traffic", {}))
        thresholds = _from_plain(Thresholds, doc.pop("thresholds", {}))
        unknown = set(doc) - {"map", "duration", "seed", "layout", "layout_args", "label"}
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(ego=ego, agents=agents, planner=planner, traffic=traffic,
                   thresholds=thresholds, **doc)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# --------------------------------------------------------------------------
# builtin scenarios


def _fill_lane(rng, lane, s0, s1, gap, speed, avoid=()):
    out = []
    s = s0 + rng.uniform(0.0, 0.5 * gap[0])
    while s < s1:
        if all(abs(s - a) > gap[0] for a in avoid):
            out.append(AgentSpec(lane, round(s, 3), round(rng.uniform(*speed), 3)))
        s += rng.uniform(*gap)
    return out


def double_merge_layout(seed, ego: EgoSpec, density=1.0):
    rng = np.random.default_rng(stream_seed(seed, "layout", "double_merge"))
    gap = (22.0 / density, 40.0 / density)
    speed = (6.0, 10.0)
    agents = []
    # stop short of each lane end so vehicles on successive lanes never share a seam
    for lane, s1 in ((0, 195.0), (1, 215.0), (2, 215.0), (11, 140.0), (12, 140.0),
                     (20, 215.0), (21, 215.0), (22, 215.0)):
        avoid = (ego.s,) if lane == ego.lane else ()
        agents += _fill_lane(rng, lane, 0.0, s1, gap, speed, avoid)
    return agents


def ring_layout(seed, ego: EgoSpec, n_agents=14, lane_map=None):
    rng = np.random.default_rng(stream_seed(seed, "layout", "ring"))
    lm = lane_map or ring_map()
    agents = []
    per_lane = [n_agents - n_agents // 2, n_agents // 2]
    for lane, count in zip((0, 1), per_lane):
        length = lm.lane(lane).length
        slots = count + (1 if lane == ego.lane else 0)
        for k in range(slots):
            s = (k + rng.uniform(-0.15, 0.15)) * length / slots
            if lane == ego.lane:
                if k == 0:
                    continue
                s = (ego.s + s) % length
            agents.append(AgentSpec(lane, round(s % length, 3), round(rng.uniform(11.0, 14.0), 3)))
    return agents


LAYOUTS = {"double_merge": double_merge_layout, "ring": ring_layout}


def double_merge_scenario(seed=0, mode="EUDM", duration=80.0, density=1.0, planner=None, **traffic):
    """Ego in the middle upstream lane; the right lane ends and must merge in front of it."""
    ego = EgoSpec(lane=1, s=40.0, velocity=8.0)
    planner = replace(planner or PlannerConfig(), mode=mode, seed=seed)
    tp = TrafficParams(**{"inflow": 0.12, "entry_lanes": (0, 1, 2), **traffic})
    return ScenarioConfig("double_merge", ego, double_merge_layout(seed, ego, density), planner, tp,
                          duration, seed, layout="double_merge", layout_args={"density": density},
                          label="double_merge")


def ring_scenario(seed=0, mode="EUDM", duration=60.0, n_agents=14, planner=None, **traffic):
    ego = EgoSpec(lane=0, s=0.0, velocity=12.0)
    planner = replace(planner or PlannerConfig(), mode=mode, seed=seed)
    tp = TrafficParams(**traffic)
    return ScenarioConfig("ring", ego, ring_layout(seed, ego, n_agents), planner, tp, duration, seed,
                          layout="ring", layout_args={"n_agents": n_agents}, label="ring")


def reseed(cfg: ScenarioConfig, seed, mode=None) -> ScenarioConfig:
    """Same scenario with a new seed (and layout, when it is generated)."""
    agents = cfg.agents
    if cfg.layout:
        agents = LAYOUTS[cfg.layout](seed, cfg.ego, **cfg.layout_args)
    planner = replace(cfg.planner, seed=seed, mode=mode or cfg.planner.mode)
    return replace(cfg, seed=seed, agents=agents, planner=planner)


# --------------------------------------------------------------------------
# environment


class Environment:
    """One authoritative world, stepped single-threaded."""

    def __init__(self, cfg: ScenarioConfig, lane_map: Optional[LaneMap] = None):
        self.cfg = cfg
        self.lane_map = lane_map or load_map(cfg.map)
        self.geo = self.lane_map.geo
        self.tp = cfg.traffic
        self.rng = np.random.default_rng(stream_seed(cfg.seed, "traffic"))
        self.noise_rng = np.random.default_rng(stream_seed(cfg.seed, "agent-noise"))
        self.time = 0.0
        self.ego_id = cfg.ego.id
        self.ids = []
        self.st = np.zeros((0, K.NSTATE))
        self.prm = np.zeros((0, K.NPARAM))
        self.params = {}
        self.traits = np.zeros((0, 4))  # politeness, threshold, b_safe, keep_right
        self.cooldown = np.zeros(0)
        self.next_decision = 0.0
        self.next_id = max(self.ego_id, 0) + 1
        self.trace = None
        self.trace_t0 = 0.0
        self.decision = None
        self.events = []
        self.frames = []
        self.done = False
        self.reason = ""
        self.odometer = 0.0
        self.latencies = []
        self.emergencies = 0

        ep = VehicleParams(self.ego_id)
        self._add(self.ego_id, ep, cfg.ego.lane, cfg.ego.s, cfg.ego.velocity, IdmParams(s0=3.0), None)
        for spec in cfg.agents:
            self._spawn(spec.lane, spec.s, spec.velocity, spec.desired_velocity, spec.aggressiveness)
        self._check_overlap()
        self._record()

    # -- population ---------------------------------------------------------
    def _add(self, vid, vp, lane_id, s, v, idm, traits):
        lane = self.lane_map.lane(lane_id)
        (x, y), (tx, ty) = lane.point_at(s)
        row = np.zeros(K.NSTATE)
        row[[K.X, K.Y, K.TH, K.V]] = (x, y, math.atan2(ty, tx), v)
        li = self.lane_map.index[lane_id]
        row[[K.LANE, K.TGT, K.S, K.TS]] = (li, li, s, s)
        row[[K.SEG, K.TSEG]] = (-1, -1)
        row[K.VDES] = idm.desired_velocity
        self.st = np.vstack([self.st, row])
        self.prm = np.vstack([self.prm, param_row(vp, idm, self.cfg.planner.pp, idm.desired_velocity)])
        K.reproject(self.geo, self.st, len(self.st) - 1)
        self.ids.append(vid)
        self.params[vid] = vp
        self.traits = np.vstack([self.traits, traits if traits is not None else np.zeros(4)])
        self.cooldown = np.append(self.cooldown, 0.0)

    def _draw(self, lane_id, desired=None, aggressiveness=None):
        tp, rng = self.tp, self.rng
        f = lambda: 1.0 + tp.spread * rng.uniform(-1.0, 1.0)  # noqa: E731
        base = tp.idm
        limit = self.lane_map.lane(lane_id).speed_limit
        v0 = limit * tp.speed_factor * f()
        T, a, b, s0 = base.T * f(), base.a * f(), base.b * f(), base.s0 * f()
        pol, thr, bs = tp.politeness * f(), tp.threshold * f(), tp.b_safe * f()
        g = rng.uniform(0.0, 1.0)
        v0 = desired if desired is not None else v0
        g = aggressiveness if aggressiveness is not None else g
        # aggressive drivers keep shorter headways, are less polite and accept harder braking
        idm = replace(base, desired_velocity=v0, T=T * (1.0 - 0.5 * g), a=a, b=b, s0=s0)
        traits = np.array([pol * (1.0 - g), thr, bs * (1.0 + 0.5 * g), tp.keep_right])
        return idm, traits

    def _spawn(self, lane_id, s, v, desired=None, aggressiveness=None):
        idm, traits = self._draw(lane_id, desired, aggressiveness)
        vid = self.next_id
        self.next_id += 1
        self._add(vid, VehicleParams(vid), lane_id, s, v, idm, traits)
        return vid

    def _remove(self, rows, why):
        for r in sorted(rows, reverse=True):
            self.events.append({"type": why, "id": self.ids[r]})
            del self.params[self.ids[r]]
            del self.ids[r]
        keep = np.ones(len(self.st), dtype=bool)
        keep[list(rows)] = False
        self.st, self.prm = self.st[keep], self.prm[keep]
        self.traits, self.cooldown = self.traits[keep], self.cooldown[keep]

    def _check_overlap(self):
        n = len(self.st)
        for i in range(n):
            for j in range(i + 1, n):
                if K.vehicles_overlap(self.st, self.prm, i, j):
                    raise ValueError(f"vehicles {self.ids[i]} and {self.ids[j]} overlap initially")

    # -- planner interface ----------------------------------------------------
    def observe(self) -> WorldState:
        vehicles = []
        for i, vid in enumerate(self.ids):
            r = self.st[i]
            vp = self.params[vid]
            vehicles.append(Vehicle(vp, VehicleState(
                float(r[K.X]), float(r[K.Y]), float(r[K.TH]), float(max(r[K.V], 0.0)),
                float(r[K.A]), float(r[K.ST]), float(math.tan(r[K.ST]) / vp.wheelbase))))
        return WorldState(self.time, self.lane_map, vehicles, self.ego_id)

    def apply_plan(self, res):
        self.trace = list(res.trace)
        self.trace_t0 = res.time
        self.latencies.append(res.latency)
        self.emergencies += int(res.emergency)
        self.decision = {
            "sequence": [[a.lateral.name, a.longitudinal.name] for a in res.best.actions],
            "emergency": res.emergency,
            "risky": res.risky_detected,
            "trace": [[round(s.x, 3), round(s.y, 3), round(s.velocity, 3)] for s in res.trace],
        }

    # -- stepping -------------------------------------------------------------
    def _ego_at(self, t):
        """Interpolated trace state at time ``t``: (x, y, heading, v, a, curvature)."""
        e = self.st[0]
        if self.trace is None:
            # no plan yet: hold speed along the current lane
            return None
        step = self.cfg.planner.sim_resolution
        u = (t - self.trace_t0) / step
        k = min(max(int(math.floor(u)), 0), len(self.trace) - 2)
        w = min(max(u - k, 0.0), 1.0)
        p, q = self.trace[k], self.trace[k + 1]
        dth = math.atan2(math.sin(q.heading - p.heading), math.cos(q.heading - p.heading))
        acc = (q.velocity - p.velocity) / step
        # cubic Hermite on position with the velocities as tangents, so the
        # distance travelled agrees with the interpolated speed
        h00, h10 = 2 * w ** 3 - 3 * w ** 2 + 1, w ** 3 - 2 * w ** 2 + w
        h01, h11 = -2 * w ** 3 + 3 * w ** 2, w ** 3 - w ** 2
        mp, mq = p.velocity * step, q.velocity * step
        x = h00 * p.x + h10 * mp * math.cos(p.heading) + h01 * q.x + h11 * mq * math.cos(q.heading)
        y = h00 * p.y + h10 * mp * math.sin(p.heading) + h01 * q.y + h11 * mq * math.sin(q.heading)
        return (x, y, p.heading + w * dth,
                p.velocity + w * (q.velocity - p.velocity), acc,
                p.curvature + w * (q.curvature - p.curvature))

    def _move_ego(self, h):
        st = self.st
        x0, y0 = st[0, K.X], st[0, K.Y]
        s = self._ego_at(self.time + h)
        if s is None:
            # no plan yet: the ego integrates like a free-road follower of its lane
            return False
        x, y, th, v, a, kappa = s
        st[0, [K.X, K.Y, K.TH, K.V, K.A]] = (x, y, math.atan2(math.sin(th), math.cos(th)), v, a)
        st[0, K.ST] = math.atan(kappa * self.params[self.ego_id].wheelbase)
        l, s_, d, seg = K.locate(self.geo, x, y)
        st[0, [K.LANE, K.TGT, K.S, K.TS, K.D, K.TD, K.SEG, K.TSEG]] = (l, l, s_, s_, d, d, seg, seg)
        K.reproject(self.geo, st, 0)
        # a lane change in the trace claims the target lane, so agents there can yield
        ahead = self._ego_at(self.time + h + self.cfg.planner.node_duration)
        lt = K.locate(self.geo, ahead[0], ahead[1])[0]
        for lat in (1, 2):
            nb = K.neighbor_lane(self.geo, l, lat)
            if nb >= 0 and self.lane_map.corridor[nb] == self.lane_map.corridor[lt]:
                K.set_target(self.geo, st, 0, nb)
        self.odometer += math.hypot(x - x0, y - y0)
        return True

    def _decide(self):
        n = len(self.st)
        active = (self.st[:, K.LANE] == self.st[:, K.TGT]) & (self.cooldown <= 0.0)
        active[0] = False
        out = np.zeros(n, dtype=np.int64)
        tr = self.traits
        K.agent_lane_choice(self.geo, self.st, self.prm, n, active, tr[:, 0].copy(), tr[:, 1].copy(),
                            tr[:, 2].copy(), tr[:, 3].copy(), self.tp.urgency_range,
                            self.tp.force_urgency, out)
        for i in np.nonzero(out)[0]:
            tl = K.neighbor_lane(self.geo, int(self.st[i, K.LANE]), int(out[i]))
            K.set_target(self.geo, self.st, int(i), int(tl))
            self.cooldown[i] = self.tp.cooldown
            self.events.append({"type": "lane_change", "id": self.ids[i],
                                "to": self.lane_map.lanes[int(tl)].id})

    def _substep(self, h):
        n = len(self.st)
        if self.time + 1e-9 >= self.next_decision:
            self._decide()
            self.next_decision = self.time + self.tp.decision_period
        played = self._move_ego(h)
        noise = self.noise_rng.standard_normal((n, 2)) * (self.tp.accel_noise, self.tp.steer_noise)
        skip = np.zeros(n, dtype=np.bool_)
        skip[0] = played
        noise[0] = 0.0
        K.step_world(self.geo, self.st, self.prm, n, h, np.zeros(n, dtype=np.bool_),
                     np.zeros(n, dtype=np.bool_), skip, noise, np.zeros(n), np.zeros(n))
        if not played:
            self.odometer += self.st[0, K.V] * h
        self.cooldown -= h
        self.time = round(self.time + h, 9)
        self._collisions()

    def _collisions(self):
        n = len(self.st)
        gone = set()
        for i in range(n):
            for j in range(i + 1, n):
                if K.vehicles_overlap(self.st, self.prm, i, j):
                    if i == 0:
                        if not self.done:
                            self.events.append({"type": "collision", "id": self.ids[j]})
                        self.done, self.reason = True, "collision"
                    else:
                        gone.update((i, j))
        if gone:
            self._remove(gone, "agent_collision")

    def _retire_and_spawn(self, dt):
        lm = self.lane_map
        out = []
        for i in range(1, len(self.st)):
            lane = lm.lanes[int(self.st[i, K.LANE])]
            if lane.successor is None and self.st[i, K.S] > lane.length and lm.is_exit(lane.id):
                out.append(i)
        if out:
            self._remove(out, "retired")
        e_lane = lm.lanes[int(self.st[0, K.LANE])]
        if e_lane.successor is None and lm.is_exit(e_lane.id) and self.st[0, K.S] > e_lane.length:
            self.done, self.reason = True, "exit"
        tp = self.tp
        for lane_id in tp.entry_lanes:
            if self.rng.uniform() >= tp.inflow * dt:
                continue
            li = lm.index[lane_id]
            c = lm.corridor[li]
            start = lm.station_offset[li]
            clear = True
            v_lead = None
            best = math.inf
            for i in range(len(self.st)):
                if c not in (lm.corridor[int(self.st[i, K.LANE])], lm.corridor[int(self.st[i, K.TGT])]):
                    continue
                ds = self.st[i, K.STA] - start
                if ds < tp.spawn_gap:
                    clear = False
                    break
                if ds < best:
                    best, v_lead = ds, self.st[i, K.V]
            if clear:
                vid = self._spawn(lane_id, 0.0, 0.0)
                r = self.ids.index(vid)
                v = self.st[r, K.VDES] if v_lead is None else min(self.st[r, K.VDES], v_lead)
                self.st[r, K.V] = v
                self.events.append({"type": "spawn", "id": vid, "lane": lane_id})

    def step(self, dt):
        n_sub = max(1, int(round(dt / self.tp.substep)))
        for _ in range(n_sub):
            self._substep(dt / n_sub)
            if self.done:
                break
        if not self.done:
            self._retire_and_spawn(dt)
        self._record()

    # -- logging --------------------------------------------------------------
    def _record(self):
        world = self.observe()
        frame = frame_from_world(world)
        if not self.frames:
            frame["meta"] = {"map": self.cfg.map if isinstance(self.cfg.map, str) else "custom",
                             "mode": self.cfg.planner.mode, "seed": self.cfg.seed,
                             "scenario": self.cfg.name}
        unsafe, hit = frame_flags(frame, self.lane_map, self.cfg.thresholds)
        frame["unsafe"] = unsafe
        frame["collision"] = hit
        frame["odometer"] = self.odometer
        frame["events"] = self.events
        frame["decision"] = self.decision
        self.events = []
        self.decision = None
        self.frames.append(frame)

    def metrics(self) -> BenchmarkMetrics:
        """Metrics from the flags computed while stepping."""
        return compute_metrics(self.frames, None, self.cfg.thresholds)

    def write_log(self, path):
        with open(path, "w") as fh:
            for f in self.frames:
                fh.write(json.dumps(f) + "\n")


@dataclass
class Episode:
    frames: list
    metrics: BenchmarkMetrics
    reason: str
    latencies: list
    emergencies: int
    env: Environment = None

    def write_log(self, path):
        self.env.write_log(path)


def run_episode(cfg: ScenarioConfig, lane_map=None, planner=None) -> Episode:
    """Drive the environment with the planner for ``cfg.duration`` seconds."""
    env = Environment(cfg, lane_map)
    planner = planner or Planner(cfg.planner)
    end = cfg.duration - 1e-9

    def stop(e, cycles):
        return e.done or e.time >= end

    replan_loop(env, cfg.planner, stop, planner)
    if not env.reason:
        env.reason = "timeout"
    return Episode(env.frames, env.metrics(), env.reason, env.latencies, env.emergencies, env)
