"""Rule-based intention belief over {LK, LCL, LCR} for surrounding vehicles."""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import OffMap
from .models import IdmParams, RssParams, pack_world
from .world import Lateral, WorldState

INTENTIONS = (Lateral.LK, Lateral.LCL, Lateral.LCR)


@dataclass(frozen=True)
class IntentionBelief:
    vehicle: int
    p_lk: float
    p_lcl: float
    p_lcr: float

    @property
    def probs(self):
        return np.array([self.p_lk, self.p_lcl, self.p_lcr])

    def prob(self, intention):
        return float(self.probs[int(intention)])

    @classmethod
    def from_probs(cls, vehicle, p):
        return cls(vehicle, float(p[0]), float(p[1]), float(p[2]))

    def to_json(self):
        return [round(self.p_lk, 6), round(self.p_lcl, 6), round(self.p_lcr, 6)]


@dataclass(frozen=True)
class LaneFeatures:
    leader_gap: Optional[float]
    velocity_diff_to_leader: Optional[float]
    follower_gap: Optional[float]
    rss_satisfied: bool


@dataclass(frozen=True)
class BeliefFeatures:
    """Observed evidence for one vehicle.  Absent lanes are ``None``."""

    current: LaneFeatures
    left: Optional[LaneFeatures]
    right: Optional[LaneFeatures]
    incentive_left: Optional[float]
    incentive_right: Optional[float]
    veto_left: bool
    veto_right: bool
    lateral_offset_trend: float
    lateral_offset: float = 0.0
    # 0..1 pressure to leave a lane that ends, per side (0 when that side is closed or ends too)
    urgency_left: float = 0.0
    urgency_right: float = 0.0

    def lane(self, intention) -> Optional[LaneFeatures]:
        return (self.current, self.left, self.right)[int(intention)]


@dataclass(frozen=True)
class BeliefConfig:
    w_incentive: float = 0.5
    w_drift: float = 2.0
    w_rss: float = 0.5
    temperature: float = 0.25
    smoothing_rate: float = 0.7
    lk_bias: float = 0.5
    politeness: float = 0.3
    b_safe: float = 4.0
    # a vehicle this far on the far side of its lane is finishing a change
    drift_offset_gate: float = 0.5
    # lane-end pressure: grows linearly over the last ``urgency_range`` metres of a lane
    w_urgency: float = 1.0
    urgency_range: float = 150.0
    idm: IdmParams = IdmParams()
    rss: RssParams = RssParams()


def _lane_features(row):
    if row[0] == 0.0:
        return None
    lead = row[1] < K.INF / 2
    follow = row[3] < K.INF / 2
    return LaneFeatures(
        float(row[1]) if lead else None,
        float(row[2]) if lead else None,
        float(row[3]) if follow else None,
        bool(row[4] > 0.5),
    )


def extract_all(world: WorldState, cfg: BeliefConfig = BeliefConfig()):
    """Features for every vehicle in ``world`` keyed by id."""
    order = list(world.ids)
    for vid in order:
        _, _, d, _ = world.located[vid]
        if abs(d) > 10.0:
            raise OffMap(f"vehicle {vid} is {abs(d):.1f} m from the nearest lane")
    st, prm = pack_world(world, order, cfg.idm)
    out = np.zeros((len(order), 3, 8))
    K.features_all(world.lane_map.geo, st, prm, st[:, K.VDES].copy(), len(order),
                   cfg.rss.as_array(), cfg.politeness, cfg.b_safe, out)
    geo = world.lane_map.geo
    feats = {}
    for i, vid in enumerate(order):
        left = _lane_features(out[i, 1])
        right = _lane_features(out[i, 2])
        lane = int(st[i, K.LANE])
        ge = K.lane_end_gap(geo, st, prm, i, lane)
        urg = min(max(1.0 - ge / cfg.urgency_range, 0.0), 1.0) if ge < K.INF / 2 else 0.0
        side = []
        for lat in (1, 2):
            nb = K.neighbor_lane(geo, lane, lat)
            side.append(urg if nb >= 0 and not geo[2][nb, K.GI_DEAD] else 0.0)
        feats[vid] = BeliefFeatures(
            current=_lane_features(out[i, 0]),
            left=left,
            right=right,
            incentive_left=float(out[i, 1, 5]) if left else None,
            incentive_right=float(out[i, 2, 5]) if right else None,
            veto_left=bool(out[i, 1, 6] > 0.5),
            veto_right=bool(out[i, 2, 6] > 0.5),
            lateral_offset_trend=float(out[i, 0, 7]),
            lateral_offset=float(out[i, 1, 7]),
            urgency_left=side[0],
            urgency_right=side[1],
        )
    return feats


def extract_features(world: WorldState, vehicle, cfg: BeliefConfig = BeliefConfig()):
    return extract_all(world, cfg)[vehicle]


def intention_scores(feat: BeliefFeatures, cfg: BeliefConfig = BeliefConfig()):
    """Raw scores; ``-inf`` marks intentions whose target lane is absent."""
    scores = np.full(3, -np.inf)
    urgency = max(feat.urgency_left, feat.urgency_right)
    scores[0] = cfg.lk_bias + cfg.w_rss * float(feat.current.rss_satisfied) - cfg.w_urgency * urgency
    trend = feat.lateral_offset_trend
    d = feat.lateral_offset
    gate = cfg.drift_offset_gate
    for lat, lane, inc, veto, drift, urg in (
        (1, feat.left, feat.incentive_left, feat.veto_left,
         min(max(trend, 0.0), 1.0) if d > -gate else 0.0, feat.urgency_left),
        (2, feat.right, feat.incentive_right, feat.veto_right,
         min(max(-trend, 0.0), 1.0) if d < gate else 0.0, feat.urgency_right),
    ):
        if lane is None:
            continue
        # leaving an ending lane does not wait for a comfortable gap
        score = cfg.w_drift * drift + cfg.w_urgency * urg
        if lane.rss_satisfied and not veto:
            score += cfg.w_incentive * min(max(inc, -1.0), 1.0) + cfg.w_rss
        scores[lat] = score
    return scores


def target_distribution(feat, cfg: BeliefConfig = BeliefConfig()):
    scores = intention_scores(feat, cfg)
    ok = np.isfinite(scores)
    z = np.where(ok, scores / cfg.temperature, -np.inf)
    z = z - z[ok].max()
    p = np.where(ok, np.exp(z), 0.0)
    return p / p.sum()


def _clean(p, ok):
    p = np.where(ok, np.maximum(p, 0.0), 0.0)
    total = p.sum()
    if total <= 0:
        p = ok.astype(float)
        total = p.sum()
    return p / total


def update_belief(prev: IntentionBelief, feat: BeliefFeatures, dt, cfg: BeliefConfig = BeliefConfig()):
    """Blend ``prev`` towards the feature-implied distribution."""
    target = target_distribution(feat, cfg)
    ok = np.array([True, feat.left is not None, feat.right is not None])
    alpha = 1.0 - math.exp(-cfg.smoothing_rate * dt)
    p = (1.0 - alpha) * prev.probs + alpha * target
    return IntentionBelief.from_probs(prev.vehicle, _clean(p, ok))


def map_intention(belief) -> Lateral:
    """Most probable intention, ties resolved LK before LCL before LCR."""
    p = belief.probs if isinstance(belief, IntentionBelief) else np.asarray(belief)
    return INTENTIONS[int(np.argmax(p))]


def feasible_intentions(world: WorldState, vehicle):
    lane = world.lane_of(vehicle)
    lm = world.lane_map
    return [lat for lat in INTENTIONS if lm.neighbor(lane, lat) is not None]


class BeliefTracker:
    """Keeps one belief per observed vehicle across planning cycles.

    A vehicle seen for the first time starts at the distribution its current
    features imply; afterwards beliefs are smoothed over time.
    """

    def __init__(self, cfg: BeliefConfig = BeliefConfig()):
        self.cfg = cfg
        self.beliefs = {}
        self.last_time = None

    def update(self, world: WorldState):
        dt = 0.0 if self.last_time is None else world.time - self.last_time
        self.last_time = world.time
        feats = extract_all(world, self.cfg)
        fresh = {}
        for vid, feat in feats.items():
            if vid == world.ego_id:
                continue
            prev = self.beliefs.get(vid)
            if prev is None:
                fresh[vid] = IntentionBelief.from_probs(vid, target_distribution(feat, self.cfg))
            else:
                fresh[vid] = update_belief(prev, feat, dt, self.cfg)
        self.beliefs = fresh
        return dict(fresh)
