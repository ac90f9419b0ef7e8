"""Conditional focused branching over agent intentions.

Given an ego policy sequence, pick the vehicles that matter (key vehicles),
keep those whose intention is unclear, probe each of their intentions with a
cheap open-loop rollout and only branch on the ones that can hurt the ego.
"""

import itertools
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _kernels as K
from .belief import INTENTIONS, IntentionBelief, map_intention
from .errors import TooManyCombinations
from .models import PackedWorld, SimSettings, _sequence_schedule, stream_seed
from .world import Lateral, WorldState

MAP_ONLY = "MAP-only"
BRANCHED = "CFB-branched"


@dataclass(frozen=True)
class CfbConfig:
    lookahead_time: float = 8.0
    lookback_time: float = 4.0
    forward_floor: float = 30.0
    backward_floor: float = 20.0
    uncertainty_threshold: float = 0.75
    top_k: int = 6
    max_enumerated_vehicles: int = 4
    max_combinations: int = 81

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if not 0 < self.uncertainty_threshold < 1:
            raise ValueError("uncertainty_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class Scenario:
    """Joint intention assignment; ``assignment`` is a sorted tuple of (id, Lateral)."""

    assignment: tuple
    probability: float
    origin: str = MAP_ONLY

    def __post_init__(self):
        items = sorted((int(k), Lateral(v)) for k, v in dict(self.assignment).items())
        object.__setattr__(self, "assignment", tuple(items))

    @property
    def as_dict(self):
        return dict(self.assignment)

    @property
    def key(self):
        return tuple((k, int(v)) for k, v in self.assignment)

    def with_probability(self, p):
        return Scenario(self.assignment, p, self.origin)

    def to_json(self):
        return {"assignment": {str(k): v.name for k, v in self.assignment},
                "probability": round(self.probability, 9), "origin": self.origin}


class Assessment(str, Enum):
    PASS = "pass"
    FAIL = "fail"


def feasible_for(world: WorldState, vid):
    lm = world.lane_map
    lane = world.lane_of(vid)
    return [lat for lat in INTENTIONS if lm.neighbor(lane, lat) is not None]


# --------------------------------------------------------------------------
# step 1 and 2


def select_key_vehicles(world: WorldState, ego, cfg: CfbConfig = CfbConfig()):
    """Vehicles on the ego's lane and its neighbours inside the speed-scaled window."""
    lm = world.lane_map
    li, _, _, sta_e = world.located[ego]
    lane = lm.lanes[li]
    corridors = {lm.corridor[li]}
    for nb in (lane.left, lane.right):
        if nb is not None:
            corridors.add(lm.corridor[lm.index[nb]])
    v = world.vehicle(ego).state.velocity
    ahead = max(cfg.lookahead_time * v, cfg.forward_floor)
    behind = max(cfg.lookback_time * v, cfg.backward_floor)
    scale = lm.station_scale[li]
    keys = set()
    for veh in world.vehicles:
        if veh.id == ego:
            continue
        lj, _, _, sta = world.located[veh.id]
        if lm.corridor[lj] not in corridors:
            continue
        ds = K.wrapd(sta - sta_e, lm.wrap) / scale
        if -behind <= ds <= ahead:
            keys.add(veh.id)
    return keys


def select_uncertain_vehicles(beliefs, cfg: CfbConfig = CfbConfig()):
    """Split key-vehicle beliefs into uncertain ids and confident MAP intentions.

    When more than ``max_enumerated_vehicles`` are uncertain, the least
    certain ones (lowest max probability, then lowest id) are kept and the
    rest are treated as confident.
    """
    beliefs = dict(beliefs)
    unsure = sorted((float(b.probs.max()), vid) for vid, b in beliefs.items()
                    if b.probs.max() < cfg.uncertainty_threshold)
    kept = [vid for _, vid in unsure[:cfg.max_enumerated_vehicles]]
    confident = {vid: map_intention(b) for vid, b in beliefs.items() if vid not in kept}
    return kept, confident


# --------------------------------------------------------------------------
# step 3: open-loop assessment


def assess_many(packed: PackedWorld, sim: SimSettings, jobs, ego_target=None, horizon=None):
    """Open-loop checks for ``jobs`` = [(sequence, vehicle, hypothesis), ...].

    Returns a boolean array, True where the check fails.  The rollouts are
    noise-free: the assessment is a worst-case geometric probe, not a sample.
    ``ego_target`` optionally fixes the ego's initial target lane index (a
    lane change already in progress keeps its lane).
    """
    if not jobs:
        return np.zeros(0, dtype=np.bool_)
    horizon = horizon or jobs[0][0].total_horizon
    dt = sim.dt
    steps = int(round(horizon / dt))
    # neither vehicle reacts to the other, so every ego schedule and every
    # agent hypothesis is simulated once on its own and the pairs are checked
    # afterwards
    ego_rows, agent_rows, pe, pa = {}, {}, [], []
    for seq, vid, hyp in jobs:
        if ego_target is not None:
            te = ego_target
        else:
            te = packed.target_for(packed.order[0], seq.actions[0].lateral)
        ek = seq.templates, tuple(a.duration for a in seq.actions), te
        if ek not in ego_rows:
            ego_rows[ek] = (len(ego_rows), seq, te)
        ak = vid, int(hyp)
        if ak not in agent_rows:
            agent_rows[ak] = (len(agent_rows), vid, packed.target_for(vid, hyp))
        pe.append(ego_rows[ek][0])
        pa.append(agent_rows[ak][0])
    lonp = sim.actions.as_array()

    ne = len(ego_rows)
    init = np.repeat(packed.st[:1], ne, axis=0)
    prm = np.repeat(packed.prm[:1], ne, axis=0)
    lat = np.zeros((ne, steps), dtype=np.int64)
    lon = np.zeros((ne, steps), dtype=np.int64)
    tgt = np.zeros(ne, dtype=np.int64)
    for i, seq, te in ego_rows.values():
        lat[i], lon[i] = _sequence_schedule(seq.actions, horizon, dt)
        tgt[i] = te
    ego_tr = np.zeros((ne, steps + 1, K.NSTATE))
    K.solo_batch(packed.geo, init, prm, lat, lon, tgt, np.zeros(ne, dtype=np.bool_), dt, lonp,
                 ego_tr)

    na = len(agent_rows)
    rows = [0] * na
    tgt = np.zeros(na, dtype=np.int64)
    for i, vid, ta in agent_rows.values():
        rows[i] = packed.row[vid]
        tgt[i] = ta
    ag_prm = packed.prm[rows]
    ag_tr = np.zeros((na, steps + 1, K.NSTATE))
    K.solo_batch(packed.geo, packed.st[rows], ag_prm, np.zeros((na, steps), dtype=np.int64),
                 np.ones((na, steps), dtype=np.int64), tgt, np.ones(na, dtype=np.bool_), dt,
                 lonp, ag_tr)

    fail = np.zeros(len(jobs), dtype=np.bool_)
    gap = np.zeros(len(jobs))
    K.pair_check(packed.geo, ego_tr, packed.prm[0], ag_tr, ag_prm, np.array(pe, dtype=np.int64),
                 np.array(pa, dtype=np.int64), sim.substeps, sim.rss.as_array(), fail, gap)
    return fail


def open_loop_assess(world: WorldState, ego_policy, vehicle, hypothesis,
                     sim: SimSettings = SimSettings()) -> Assessment:
    """Probe one intention hypothesis against the ego policy.

    A hypothesis whose lane does not exist is skipped and counts as a pass.
    """
    if Lateral(hypothesis) not in feasible_for(world, vehicle):
        return Assessment.PASS
    packed = PackedWorld(world, [world.ego_id, vehicle], sim)
    fail = assess_many(packed, sim, [(ego_policy, vehicle, Lateral(hypothesis))])
    return Assessment.FAIL if fail[0] else Assessment.PASS


# --------------------------------------------------------------------------
# step 3 and 4: enumeration and truncation


def _renormalized(belief: IntentionBelief, feasible):
    p = np.array([belief.prob(lat) if lat in feasible else 0.0 for lat in INTENTIONS])
    total = p.sum()
    if total <= 0:
        p = np.array([1.0 if lat in feasible else 0.0 for lat in INTENTIONS])
        total = p.sum()
    return p / total


def enumerate_scenarios(uncertain_failing, beliefs, confident, feasible=None,
                        max_combinations=81):
    """Cartesian product over the failing vehicles' feasible intentions.

    Every other vehicle in ``confident`` stays at its MAP intention and
    contributes a factor of 1.  ``feasible`` maps id -> allowed intentions
    (all three when missing).
    """
    feasible = feasible or {}
    failing = sorted(uncertain_failing)
    options = []
    for vid in failing:
        allowed = feasible.get(vid, list(INTENTIONS))
        p = _renormalized(beliefs[vid], allowed)
        options.append([(lat, p[int(lat)]) for lat in INTENTIONS if lat in allowed and p[int(lat)] > 0])
    count = int(np.prod([len(o) for o in options])) if options else 1
    if count > max_combinations:
        raise TooManyCombinations(f"{count} intention combinations exceed the cap of {max_combinations}")
    map_assign = {vid: map_intention(beliefs[vid]) for vid in failing}
    map_assign.update(confident)
    out = []
    for combo in itertools.product(*options):
        assign = dict(confident)
        prob = 1.0
        for vid, (lat, p) in zip(failing, combo):
            assign[vid] = lat
            prob *= p
        origin = MAP_ONLY if all(assign[v] == map_assign[v] for v in failing) else BRANCHED
        out.append(Scenario(assign, float(prob), origin))
    return out


def top_k_marginalize(scenarios, k):
    """Keep the ``k`` most probable scenarios and renormalise their weights."""
    ranked = sorted(scenarios, key=lambda s: (-s.probability, s.key))[:k]
    total = sum(s.probability for s in ranked)
    if total <= 0:
        return [s.with_probability(1.0 / len(ranked)) for s in ranked]
    return [s.with_probability(s.probability / total) for s in ranked]


def _fallback(failing, beliefs, confident, feasible):
    """MAP scenario plus the single most probable deviation from it."""
    base = dict(confident)
    for vid in failing:
        base[vid] = map_intention(beliefs[vid])
    best = None
    for vid in sorted(failing):
        p = _renormalized(beliefs[vid], feasible.get(vid, list(INTENTIONS)))
        pm = p[int(base[vid])]
        for lat in INTENTIONS:
            if lat == base[vid] or p[int(lat)] <= 0:
                continue
            ratio = p[int(lat)] / pm
            if best is None or ratio > best[0]:
                best = (ratio, vid, lat)
    scen = [Scenario(base, 1.0, MAP_ONLY)]
    if best is not None:
        alt = dict(base)
        alt[best[1]] = best[2]
        scen = [Scenario(base, 1.0 / (1 + best[0]), MAP_ONLY),
                Scenario(alt, best[0] / (1 + best[0]), BRANCHED)]
    return scen


# --------------------------------------------------------------------------
# composition


@dataclass
class CfbResult:
    scenarios: list
    key: set
    uncertain: list
    failing: list
    fallback: bool = False

    def to_json(self):
        return {"key": sorted(self.key), "uncertain": list(self.uncertain),
                "failing": list(self.failing), "fallback": self.fallback,
                "scenarios": [s.to_json() for s in self.scenarios]}


class CfbPlanner:
    """Per-cycle CFB state shared across the policy sequences of one cycle."""

    def __init__(self, world: WorldState, beliefs, cfg: CfbConfig = CfbConfig(),
                 sim: SimSettings = SimSettings(), packed: PackedWorld = None):
        self.world = world
        self.cfg = cfg
        self.sim = sim
        ego = world.ego_id
        self.key = select_key_vehicles(world, ego, cfg)
        self.beliefs = {vid: beliefs.get(vid) or IntentionBelief(vid, 1.0, 0.0, 0.0)
                        for vid in self.key}
        self.uncertain, self.confident = select_uncertain_vehicles(self.beliefs, cfg)
        self.feasible = {vid: feasible_for(world, vid) for vid in self.key}
        self.packed = packed

    def run(self, sequences, ego_target=None):
        """CFB result for every sequence, with all assessments in one batch."""
        jobs = []
        owners = []
        for si, seq in enumerate(sequences):
            for vid in self.uncertain:
                for hyp in self.feasible[vid]:
                    jobs.append((seq, vid, hyp))
                    owners.append((si, vid))
        if self.packed is None or any(v not in self.packed.row for v in self.uncertain):
            self.packed = PackedWorld(self.world, [self.world.ego_id] + sorted(self.key), self.sim)
        fails = assess_many(self.packed, self.sim, jobs, ego_target)
        failing = [set() for _ in sequences]
        for (si, vid), f in zip(owners, fails):
            if f:
                failing[si].add(vid)
        return [self._finish(sorted(f)) for f in failing]

    def _finish(self, failing):
        confident = dict(self.confident)
        for vid in self.uncertain:
            if vid not in failing:
                confident[vid] = map_intention(self.beliefs[vid])
        try:
            scen = enumerate_scenarios(failing, self.beliefs, confident, self.feasible,
                                       self.cfg.max_combinations)
            scen = top_k_marginalize(scen, self.cfg.top_k)
            fb = False
        except TooManyCombinations:
            scen = _fallback(failing, self.beliefs, confident, self.feasible)
            fb = True
        return CfbResult(scen, self.key, list(self.uncertain), failing, fb)

    def map_only(self):
        assign = {vid: map_intention(b) for vid, b in self.beliefs.items()}
        return CfbResult([Scenario(assign, 1.0, MAP_ONLY)], self.key, list(self.uncertain), [])


def cfb(world: WorldState, beliefs, ego_policy, cfg: CfbConfig = CfbConfig(),
        sim: SimSettings = SimSettings()):
    """Weighted scenarios for one ego policy sequence."""
    return CfbPlanner(world, beliefs, cfg, sim).run([ego_policy])[0].scenarios
