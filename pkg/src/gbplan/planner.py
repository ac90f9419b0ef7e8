"""Policy selection: tree of ego sequences x focused scenarios x closed-loop rollouts."""

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

import numpy as np

from . import _kernels as K
from .belief import BeliefConfig, BeliefTracker, IntentionBelief, map_intention
from .cfb import MAP_ONLY, CfbConfig, CfbPlanner, CfbResult, Scenario
from .dcp_tree import (PolicySequence, advance_ongoing, extract_policy_sequences,
                       mpdm_sequences, update_dcp_tree)
from .errors import NoFeasiblePolicy
from .models import (ActionParams, IdmParams, NoiseParams, PackedWorld, PurePursuitParams,
                     Rollout, RssParams, SimSettings, _sequence_schedule, stream_seed, unit_normals)
from .world import Lateral, Longitudinal, SemanticAction, VehicleState, WorldState, full_action_set

MODES = ("EUDM", "EDM", "MPDM")


@dataclass(frozen=True)
class PlannerConfig:
    mode: str = "EUDM"
    horizon: float = 8.0
    node_duration: float = 2.0
    sim_resolution: float = 0.4
    substeps: int = 4
    replan_dt: float = 0.05
    w_efficiency: float = 1.0
    w_safety: float = 2.0
    w_consistency: float = 0.3
    risky_penalty: float = 100.0
    # desired ego speed as a fraction of the lane speed limit
    desired_speed_factor: float = 1.0
    emergency_decel: float = 2.5
    # vehicles simulated besides the ego: key vehicles first, then nearest
    max_rollout_agents: int = 15
    rollout_margin: float = 20.0
    workers: int = 1
    seed: int = 0
    cfb: CfbConfig = CfbConfig()
    # a wider standstill gap than the IDM default keeps stopped queues above the safety threshold
    idm: IdmParams = IdmParams(s0=3.0)
    pp: PurePursuitParams = PurePursuitParams()
    rss: RssParams = RssParams()
    noise: NoiseParams = NoiseParams()
    actions: ActionParams = ActionParams()
    belief: BeliefConfig = BeliefConfig()

    def __post_init__(self):
        mode = self.mode.upper()
        if mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "mode", mode)
        h = self.horizon / self.node_duration
        if abs(h - round(h)) > 1e-9 or round(h) < 1:
            raise ValueError("horizon must be a whole number of node durations")
        r = self.node_duration / self.sim_resolution
        if abs(r - round(r)) > 1e-9:
            raise ValueError("sim_resolution must divide node_duration")
        if min(self.w_efficiency, self.w_safety, self.w_consistency, self.risky_penalty) < 0:
            raise ValueError("reward weights must be nonnegative")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    @property
    def height(self):
        return int(round(self.horizon / self.node_duration))

    @property
    def sim(self) -> SimSettings:
        return SimSettings(self.sim_resolution, self.substeps, self.idm, self.pp, self.rss,
                           replace(self.noise, seed=self.seed), self.actions)

    def to_json(self):
        return _to_plain(self)

    @classmethod
    def from_json(cls, doc):
        return _from_plain(cls, doc)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    return obj


def _from_plain(cls, doc):
    if not isinstance(doc, dict):
        raise ValueError(f"expected an object for {cls.__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _from_plain(type(current), value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


@dataclass
class PolicyEvaluation:
    sequence: PolicySequence
    scenarios: list
    rollouts: list
    rewards: list
    weighted_reward: float
    feasible: bool
    cfb: CfbResult = None

    def to_json(self):
        return {"sequence": self.sequence.to_json(), "reward": round(self.weighted_reward, 9),
                "feasible": self.feasible,
                "scenario_rewards": [round(r, 9) for r in self.rewards]}


@dataclass
class PlanResult:
    best: PolicySequence
    next_ongoing: SemanticAction
    trace: list
    evaluations: list
    emergency: bool = False
    latency: float = 0.0
    time: float = 0.0

    def __iter__(self):
        return iter((self.best, self.next_ongoing, self.trace))

    @property
    def best_evaluation(self):
        for ev in self.evaluations:
            if ev.sequence == self.best:
                return ev
        return None

    @property
    def risky_detected(self):
        ev = self.best_evaluation
        return bool(ev and ev.cfb and any(s.origin != MAP_ONLY for s in ev.cfb.scenarios))

    def to_log(self):
        best = self.best_evaluation
        return {
            "timestamp": round(self.time, 6),
            "candidates": len(self.evaluations),
            "rewards": [round(ev.weighted_reward, 6) for ev in self.evaluations],
            "selected": self.best.to_json(),
            "emergency": self.emergency,
            "scenarios": [s.to_json() for s in best.scenarios] if best else [],
            "cfb": best.cfb.to_json() if best and best.cfb else None,
            "trace": [[round(s.x, 4), round(s.y, 4), round(s.heading, 5), round(s.velocity, 4),
                       round(s.acceleration, 4), round(s.curvature, 6)] for s in self.trace],
        }


# --------------------------------------------------------------------------
# reward


def action_distance(seq, reference):
    """Number of node positions whose (lateral, longitudinal) pair differs."""
    if reference is None:
        return 0
    a = seq.templates if isinstance(seq, PolicySequence) else tuple(seq)
    b = reference.templates if isinstance(reference, PolicySequence) else tuple(reference)
    n = min(len(a), len(b))
    return sum(1 for i in range(n) if a[i] != b[i]) + abs(len(a) - len(b))


def rollout_reward(rollout: Rollout, v_desired, cfg: PlannerConfig, consistency=0):
    return float(_rewards(rollout.frames[None, :, 0, K.V], rollout.rss_shortfall[None],
                          np.array([rollout.ego_collision]), v_desired, cfg)[0]
                 - cfg.w_consistency * consistency)


def _rewards(ego_v, shortfall, ego_coll, v_desired, cfg):
    """Vectorised per-rollout reward without the consistency term."""
    eff = np.abs(ego_v[:, 1:] - v_desired).mean(axis=1)
    steps = shortfall.shape[1] - 1
    safety = shortfall[:, 1:].sum(axis=1) / steps
    risky = ego_coll | np.any(shortfall[:, 1:] > 0, axis=1)
    return -cfg.w_efficiency * eff - cfg.w_safety * safety - cfg.risky_penalty * risky


def evaluate_policy(sequence, rollouts, weights, cfg: PlannerConfig = PlannerConfig(),
                    last_best=None, v_desired=None, scenarios=None):
    """Weighted reward of one sequence over its scenario rollouts."""
    if not rollouts:
        raise ValueError("no rollouts to evaluate")
    if v_desired is None:
        v_desired = float(rollouts[0].frames[0, 0, K.V])
    dist = action_distance(sequence, last_best)
    rewards = [rollout_reward(r, v_desired, cfg, dist) for r in rollouts]
    weighted = float(np.dot(weights, rewards))
    feasible = not all(r.ego_collision for r in rollouts)
    return PolicyEvaluation(sequence, list(scenarios or []), list(rollouts), rewards, weighted, feasible)


# --------------------------------------------------------------------------
# core


def _ego_desired(world, cfg):
    lm = world.lane_map
    return cfg.desired_speed_factor * lm.lane(world.lane_of(world.ego_id)).speed_limit


def rollout_agents(world: WorldState, key, cfg: PlannerConfig):
    """Vehicles simulated alongside the ego: key vehicles plus nearest others."""
    lm = world.lane_map
    li, _, _, sta_e = world.located[world.ego_id]
    v = world.ego.state.velocity
    ahead = max(cfg.cfb.lookahead_time * v, cfg.cfb.forward_floor) + cfg.rollout_margin
    behind = max(cfg.cfb.lookback_time * v, cfg.cfb.backward_floor) + cfg.rollout_margin
    scale = lm.station_scale[li]
    near = []
    for veh in world.agents:
        ds = K.wrapd(world.located[veh.id][3] - sta_e, lm.wrap) / scale
        if -behind <= ds <= ahead and veh.id not in key:
            near.append((abs(ds), veh.id))
    room = max(cfg.max_rollout_agents - len(key), 0)
    chosen = sorted(key) + sorted(vid for _, vid in sorted(near)[:room])
    return chosen


def feasible_laterals(world: WorldState):
    lm = world.lane_map
    lane = world.lane_of(world.ego_id)
    return {lat for lat in Lateral if lm.neighbor(lane, lat) is not None}


def candidate_sequences(world, ongoing, cfg: PlannerConfig):
    action_set = full_action_set(cfg.node_duration)
    ok = feasible_laterals(world)
    if cfg.mode == "MPDM":
        return mpdm_sequences(action_set, cfg.height, cfg.horizon, cfg.node_duration, ok)
    tree = update_dcp_tree(action_set, ongoing, cfg.height, ok)
    return extract_policy_sequences(tree, cfg.horizon, cfg.node_duration)


def cycle_noise(cfg, world, order, steps):
    """Unit-normal disturbances shared by every rollout of a planning cycle.

    Common random numbers: candidates are compared under the same
    disturbance, and the draw depends only on the seed, the time and the
    simulated vehicles, so planners in different modes see the same noise.
    Row 0 (the ego) is left noise-free so the emitted trace is smooth.
    """
    seed = stream_seed(cfg.seed, round(world.time, 6), tuple(order))
    z = unit_normals(seed, (steps, len(order), 2))
    # the ego's own commands are exact; noise models the other drivers
    z[:, 0, :] = 0.0
    return z


def _run_batches(packed, jobs, tgt0, z, schedule, cfg, sim):
    """Closed-loop rollouts for all jobs, optionally fanned out over threads."""
    r = len(jobs)
    n = packed.n
    lat, lon = schedule
    nrec = lat.shape[1] // sim.substeps
    out_st = np.zeros((r, nrec + 1, n, K.NSTATE))
    out_ann = np.zeros((r, nrec + 1, 4))
    out_coll = np.zeros((r, 2), dtype=np.bool_)
    hold = np.zeros(n, dtype=np.bool_)
    free = np.zeros(n, dtype=np.bool_)
    args = (sim.noise.as_array(), sim.dt, sim.substeps, sim.rss.as_array(), sim.actions.as_array())

    def work(lo, hi):
        K.rollout_batch(packed.geo, packed.st, packed.prm, n, lat[lo:hi], lon[lo:hi], tgt0[lo:hi],
                        hold, free, z, *args, out_st[lo:hi], out_ann[lo:hi],
                        out_coll[lo:hi])

    if cfg.workers <= 1 or r < 2:
        work(0, r)
    else:
        bounds = np.linspace(0, r, min(cfg.workers * 2, r) + 1).astype(int)
        with ThreadPoolExecutor(cfg.workers) as pool:
            list(pool.map(lambda b: work(*b), zip(bounds[:-1], bounds[1:])))
    return out_st, out_ann, out_coll


def plan_once(world: WorldState, beliefs, ongoing: SemanticAction, cfg: PlannerConfig = PlannerConfig(),
              last_best=None, ego_target=None):
    """One planning cycle.

    ``beliefs`` maps agent id -> IntentionBelief; ``last_best`` is the
    reference sequence (or template tuple) for the consistency term;
    ``ego_target`` is the lane id of a lane change already in progress.
    Returns a PlanResult, which unpacks as ``(best, next_ongoing, trace)``.
    """
    t0 = time.perf_counter()
    sim = cfg.sim
    lm = world.lane_map
    seqs = candidate_sequences(world, ongoing, cfg)
    cfbp = CfbPlanner(world, beliefs, cfg.cfb, sim)
    order = [world.ego_id] + rollout_agents(world, cfbp.key, cfg)
    packed = PackedWorld(world, order, sim)
    cfbp.packed = packed

    def first_target(seq):
        lat0 = seq.actions[0].lateral
        if ego_target is not None and lat0 == ongoing.lateral:
            return lm.index[ego_target]
        return packed.target_for(world.ego_id, lat0)

    ego_tgt = first_target(seqs[0])

    if cfg.mode == "EUDM":
        cfb_results = cfbp.run(seqs, ego_tgt)
    else:
        base = cfbp.map_only()
        cfb_results = [base] * len(seqs)

    # intentions of simulated agents outside any scenario: MAP or lane keeping
    default = {}
    for vid in order[1:]:
        b = beliefs.get(vid)
        default[vid] = map_intention(b) if b is not None else Lateral.LK

    jobs = []
    for si, (seq, res) in enumerate(zip(seqs, cfb_results)):
        for sc in res.scenarios:
            jobs.append((si, sc))
    steps = int(round(cfg.horizon / sim.dt))
    lat = np.zeros((len(jobs), steps), dtype=np.int64)
    lon = np.zeros((len(jobs), steps), dtype=np.int64)
    base_tgt = np.array([0] + [packed.targets[row, int(default[vid])]
                               for row, vid in enumerate(order[1:], start=1)], dtype=np.int64)
    tgt0 = np.repeat(base_tgt[None, :], len(jobs), axis=0)
    first = [first_target(seq) for seq in seqs]
    for ji, (si, sc) in enumerate(jobs):
        lat[ji], lon[ji] = _sequence_schedule(seqs[si].actions, cfg.horizon, sim.dt)
        tgt0[ji, 0] = first[si]
        for vid, lat_v in sc.assignment:
            row = packed.row.get(vid)
            if row is not None:
                tgt0[ji, row] = packed.targets[row, int(lat_v)]
    z = cycle_noise(cfg, world, order, steps)
    out_st, out_ann, out_coll = _run_batches(packed, jobs, tgt0, z, (lat, lon), cfg, sim)

    v_des = _ego_desired(world, cfg)
    base_rewards = _rewards(out_st[:, :, 0, K.V], out_ann[:, :, 1], out_coll[:, 0], v_des, cfg)
    times = world.time + sim.step * np.arange(out_st.shape[1])
    evaluations = []
    ji = 0
    for si, (seq, res) in enumerate(zip(seqs, cfb_results)):
        m = len(res.scenarios)
        dist = action_distance(seq, last_best)
        rewards = [float(x) - cfg.w_consistency * dist for x in base_rewards[ji:ji + m]]
        weights = np.array([s.probability for s in res.scenarios])
        rollouts = [
            Rollout(lm, order, world, times, out_st[k], out_ann[k, :, 0], out_ann[k, :, 1],
                    bool(out_coll[k, 0] or out_coll[k, 1]), bool(out_coll[k, 0]), sim.step)
            for k in range(ji, ji + m)
        ]
        feasible = not all(out_coll[ji:ji + m, 0])
        evaluations.append(PolicyEvaluation(seq, list(res.scenarios), rollouts, rewards,
                                            float(np.dot(weights, rewards)), feasible, res))
        ji += m

    best = select_policy(evaluations, last_best)
    if best is None:
        raise NoFeasiblePolicy("every candidate sequence collides in every scenario")
    trace = _trace(best.rollouts[0], order, world)
    nxt = advance_ongoing(best.sequence, cfg.replan_dt, cfg.node_duration)
    return PlanResult(best.sequence, nxt, trace, evaluations, False,
                      time.perf_counter() - t0, world.time)


def select_policy(evaluations, last_best=None):
    """Feasible evaluation with the highest reward.

    Ties go to the sequence matching ``last_best``, then to the
    lexicographically smallest action templates.
    """
    ref = None
    if last_best is not None:
        ref = last_best.templates if isinstance(last_best, PolicySequence) else tuple(last_best)
    cands = [e for e in evaluations if e.feasible]
    if not cands:
        return None
    return min(cands, key=lambda e: (-e.weighted_reward, e.sequence.templates != ref,
                                     e.sequence.templates))


def _trace(rollout, order, world):
    wb = world.ego.params.wheelbase
    out = []
    for f in rollout.frames:
        e = f[0]
        out.append(VehicleState(float(e[K.X]), float(e[K.Y]), float(e[K.TH]), float(max(e[K.V], 0.0)),
                                float(e[K.A]), float(e[K.ST]), float(math.tan(e[K.ST]) / wb)))
    return out


def emergency_plan(world: WorldState, cfg: PlannerConfig):
    """Brake in lane at the comfortable deceleration along the current lane."""
    lm = world.lane_map
    ego = world.ego
    li, s, _, _ = world.located[world.ego_id]
    seq = PolicySequence([SemanticAction(Lateral.LK, Longitudinal.DECELERATE, cfg.node_duration)]
                         * cfg.height)
    b = cfg.emergency_decel
    v0 = ego.state.velocity
    trace = []
    steps = int(round(cfg.horizon / cfg.sim_resolution))
    for k in range(steps + 1):
        t = k * cfg.sim_resolution
        tstop = v0 / b if b > 0 else 0.0
        tt = min(t, tstop)
        v = max(v0 - b * tt, 0.0)
        dist = v0 * tt - 0.5 * b * tt * tt
        x, y, tx, ty = K.lane_point(lm.geo, li, s + dist)
        trace.append(VehicleState(float(x), float(y), math.atan2(ty, tx), v,
                                  -b if v > 0 else 0.0, 0.0, 0.0))
    nxt = advance_ongoing(seq, cfg.replan_dt, cfg.node_duration)
    return PlanResult(seq, nxt, trace, [], True, 0.0, world.time)


def rollout_scenario(world: WorldState, scenario: Scenario, sequence: PolicySequence,
                     cfg: PlannerConfig = PlannerConfig(), beliefs=None, ego_target=None) -> Rollout:
    """Closed-loop rollout of one sequence under one scenario.

    Every vehicle of ``world`` is simulated; vehicles missing from the
    scenario follow their MAP intention (lane keeping without a belief).
    """
    sim = cfg.sim
    order = [world.ego_id] + sorted(v.id for v in world.agents)
    packed = PackedWorld(world, order, sim)
    beliefs = beliefs or {}
    assign = {vid: (map_intention(beliefs[vid]) if vid in beliefs else Lateral.LK) for vid in order[1:]}
    assign.update(scenario.as_dict)
    lat, lon = _sequence_schedule(sequence.actions, cfg.horizon, sim.dt)
    tgt0 = np.zeros((1, packed.n), dtype=np.int64)
    tgt0[0, 0] = (packed.target_for(world.ego_id, sequence.actions[0].lateral) if ego_target is None
                  else world.lane_map.index[ego_target])
    for row, vid in enumerate(order[1:], start=1):
        tgt0[0, row] = packed.target_for(vid, assign[vid])
    z = cycle_noise(cfg, world, order, len(lat))
    out_st, out_ann, out_coll = _run_batches(packed, [0], tgt0, z, (lat[None], lon[None]),
                                             replace(cfg, workers=1), sim)
    times = world.time + sim.step * np.arange(out_st.shape[1])
    return Rollout(world.lane_map, order, world, times, out_st[0], out_ann[0, :, 0],
                   out_ann[0, :, 1], bool(out_coll[0].any()), bool(out_coll[0, 0]), sim.step)


# --------------------------------------------------------------------------
# stateful loop


class Planner:
    """Carries the ongoing action, lane-change target and beliefs across cycles."""

    def __init__(self, cfg: PlannerConfig = PlannerConfig()):
        self.cfg = cfg
        self.tracker = BeliefTracker(cfg.belief)
        self.ongoing = SemanticAction(Lateral.LK, Longitudinal.MAINTAIN, cfg.node_duration)
        self.reference = None
        self.target = None
        self.target_lateral = None

    def _resolve_target(self, world, lateral):
        lm = world.lane_map
        lane = world.lane_of(world.ego_id)
        li = lm.index[lane]
        if self.target is not None and lateral == self.target_lateral and lateral != Lateral.LK:
            tc = lm.corridor[lm.index[self.target]]
            if tc == lm.corridor[li]:
                return lane
            for nb in (lm.lane(lane).left, lm.lane(lane).right):
                if nb is not None and lm.corridor[lm.index[nb]] == tc:
                    return nb
        nb = lm.neighbor(lane, lateral)
        return lane if nb is None else nb

    def plan(self, world: WorldState) -> PlanResult:
        beliefs = self.tracker.update(world)
        cfg = self.cfg
        lateral = self.ongoing.lateral
        self.target = self._resolve_target(world, lateral)
        self.target_lateral = lateral
        try:
            res = plan_once(world, beliefs, self.ongoing, cfg, self.reference, self.target)
        except NoFeasiblePolicy:
            res = emergency_plan(world, cfg)
        res.beliefs = beliefs
        first = res.best.actions[0]
        if cfg.mode == "MPDM":
            # constant policies: the decision is re-made every cycle
            self.ongoing = first.with_duration(cfg.node_duration)
            self.reference = res.best.templates
        else:
            self.ongoing = res.next_ongoing
            switched = first.duration - cfg.replan_dt <= 1e-6
            t = res.best.templates
            self.reference = t[1:] + t[-1:] if switched else t
        if self.ongoing.lateral != lateral:
            self.target_lateral = None
        return res


def replan_loop(env, cfg: PlannerConfig, stop_condition, planner=None):
    """Drive ``env`` with the planner until ``stop_condition(env, cycles)``.

    ``env`` needs ``observe() -> WorldState``, ``apply_plan(PlanResult)`` and
    ``step(dt)``.  Returns the per-cycle trace log entries.
    """
    planner = planner or Planner(cfg)
    log = []
    cycles = 0
    while not stop_condition(env, cycles):
        world = env.observe()
        res = planner.plan(world)
        entry = res.to_log()
        entry["ongoing"] = [planner.ongoing.lateral.name, planner.ongoing.longitudinal.name,
                            round(planner.ongoing.duration, 6)]
        log.append(entry)
        env.apply_plan(res)
        env.step(cfg.replan_dt)
        cycles += 1
    return log
