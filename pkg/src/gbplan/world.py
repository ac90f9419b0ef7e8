"""Lane map, vehicle state and world snapshot types.

Lanes are polyline centerlines with piecewise-linear arc length.  A map is
immutable once built; the derived arrays used by the compiled kernels are
computed once in ``LaneMap.__post_init__``.
"""

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import cached_property
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import MalformedLog, MapError, NoSuchNeighbor, ProjectionOutOfRange, EmptyLog

MAX_SPACING = 2.0


class Lateral(IntEnum):
    LK = 0
    LCL = 1
    LCR = 2


class Longitudinal(IntEnum):
    ACCELERATE = 0
    MAINTAIN = 1
    DECELERATE = 2


@dataclass(frozen=True, order=True)
class SemanticAction:
    lateral: Lateral
    longitudinal: Longitudinal
    duration: float = 2.0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"action duration must be positive, got {self.duration}")
        object.__setattr__(self, "lateral", Lateral(self.lateral))
        object.__setattr__(self, "longitudinal", Longitudinal(self.longitudinal))

    @property
    def code(self) -> int:
        """Template index in [0, 9); ignores duration."""
        return int(self.lateral) * 3 + int(self.longitudinal)

    def same_template(self, other) -> bool:
        return self.lateral == other.lateral and self.longitudinal == other.longitudinal

    def with_duration(self, duration):
        return replace(self, duration=duration)

    def __str__(self):
        return f"{self.lateral.name}/{self.longitudinal.name[:3]}({self.duration:.2f})"


def full_action_set(duration=2.0):
    return [SemanticAction(lat, lon, duration) for lat in Lateral for lon in Longitudinal]


# --------------------------------------------------------------------------
# map


@dataclass
class Lane:
    id: int
    centerline: np.ndarray
    left: Optional[int] = None
    right: Optional[int] = None
    successor: Optional[int] = None
    speed_limit: float = 15.0

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise MapError(f"lane {self.id}: centerline needs at least 2 points")
        if self.successor == self.id and np.hypot(*(pts[-1] - pts[0])) > 1e-9:
            pts = np.vstack([pts, pts[:1]])
        self.centerline = pts
        seg = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(seg <= 0):
            raise MapError(f"lane {self.id}: repeated centerline points")
        if np.any(seg > MAX_SPACING + 1e-9):
            raise MapError(f"lane {self.id}: point spacing {seg.max():.3f} m exceeds {MAX_SPACING} m")
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def point_at(self, s):
        """Centerline point and unit tangent at arc length ``s`` (clamped)."""
        s = min(max(s, 0.0), self.length)
        k = min(int(np.searchsorted(self.cum, s, side="right")) - 1, len(self.cum) - 2)
        a, b = self.centerline[k], self.centerline[k + 1]
        seglen = self.cum[k + 1] - self.cum[k]
        t = (s - self.cum[k]) / seglen
        tan = (b - a) / seglen
        return a + t * (b - a), tan

    def to_json(self):
        return {
            "id": self.id,
            "points": self.centerline.round(6).tolist(),
            "left": self.left,
            "right": self.right,
            "successor": self.successor,
            "speed_limit": self.speed_limit,
        }


def _project_extended(pts, cum, p):
    """Nearest segment projection returning (s_extrapolated, d, dist)."""
    a = pts[:-1]
    e = pts[1:] - a
    L2 = (e ** 2).sum(axis=1)
    t = ((p - a) * e).sum(axis=1) / L2
    tc = np.clip(t, 0.0, 1.0)
    foot = a + tc[:, None] * e
    dist = np.hypot(*(p - foot).T)
    k = int(np.argmin(dist))
    te = t[k] if (k == 0 and t[k] < 0) or (k == len(e) - 1 and t[k] > 1) else tc[k]
    seglen = math.sqrt(L2[k])
    s = cum[k] + te * seglen
    d = (e[k, 0] * (p[1] - a[k, 1]) - e[k, 1] * (p[0] - a[k, 0])) / seglen
    return s, d, float(dist[k]), k, float(t[k])


@dataclass
class LaneMap:
    lanes: list
    ring: bool = False

    def __post_init__(self):
        self.lanes = list(self.lanes)
        self.index = {}
        for i, lane in enumerate(self.lanes):
            if lane.id in self.index:
                raise MapError(f"duplicate lane id {lane.id}")
            self.index[lane.id] = i
        self._validate()
        self._derive()

    # -- loading -----------------------------------------------------------
    @classmethod
    def from_json(cls, doc):
        try:
            lanes = [
                Lane(
                    id=int(l["id"]),
                    centerline=np.asarray(l["points"], dtype=float),
                    left=l.get("left"),
                    right=l.get("right"),
                    successor=l.get("successor"),
                    speed_limit=float(l.get("speed_limit", 15.0)),
                )
                for l in doc["lanes"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise MapError(f"malformed map document: {exc}") from exc
        return cls(lanes, ring=bool(doc.get("ring", False)))

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise MapError(f"cannot read map {path}: {exc}") from exc
        return cls.from_json(doc)

    def to_json(self):
        return {"ring": self.ring, "lanes": [l.to_json() for l in self.lanes]}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    # -- checks ------------------------------------------------------------
    def _validate(self):
        for lane in self.lanes:
            for ref in (lane.left, lane.right, lane.successor):
                if ref is not None and ref not in self.index:
                    raise MapError(f"lane {lane.id} references unknown lane {ref}")
            if lane.left is not None and self.lane(lane.left).right != lane.id:
                raise MapError(f"asymmetric neighbors: {lane.id}.left={lane.left}")
            if lane.right is not None and self.lane(lane.right).left != lane.id:
                raise MapError(f"asymmetric neighbors: {lane.id}.right={lane.right}")
            if lane.speed_limit <= 0:
                raise MapError(f"lane {lane.id}: speed limit must be positive")
        for lane in self.lanes:
            seen = {lane.id}
            cur = lane.successor
            while cur is not None:
                if cur in seen:
                    if not self.ring:
                        raise MapError(f"successor cycle through lane {cur} on a non-ring map")
                    break
                seen.add(cur)
                cur = self.lane(cur).successor

    def _derive(self):
        n = len(self.lanes)
        idx = self.index
        # corridors: union of successor chains
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for lane in self.lanes:
            if lane.successor is not None:
                a, b = find(idx[lane.id]), find(idx[lane.successor])
                parent[max(a, b)] = min(a, b)
        roots = {}
        self.corridor = np.array([roots.setdefault(find(i), len(roots)) for i in range(n)], dtype=np.int64)

        # map-wide station: offset + scale * s, propagated over neighbour and successor edges
        off = np.full(n, np.nan)
        scale = np.ones(n)
        wrap = 0.0
        for seed in range(n):
            if not np.isnan(off[seed]):
                continue
            off[seed] = 0.0
            queue = deque([seed])
            while queue:
                i = queue.popleft()
                lane = self.lanes[i]
                if lane.successor is not None:
                    j = idx[lane.successor]
                    end = off[i] + lane.length * scale[i]
                    if np.isnan(off[j]):
                        off[j] = end
                        scale[j] = scale[i]
                        queue.append(j)
                    elif self.ring and wrap == 0.0:
                        wrap = end - off[j]
                for nb in (lane.left, lane.right):
                    if nb is None or not np.isnan(off[idx[nb]]):
                        continue
                    j = idx[nb]
                    other = self.lanes[j]
                    p1, _ = other.point_at(0.25 * other.length)
                    p3, _ = other.point_at(0.75 * other.length)
                    s1 = _project_extended(lane.centerline, lane.cum, p1)[0]
                    s3 = _project_extended(lane.centerline, lane.cum, p3)[0]
                    ratio = (s3 - s1) / (0.5 * other.length)
                    if not ratio > 0:
                        ratio = lane.length / other.length
                    scale[j] = scale[i] * ratio
                    off[j] = off[i] + scale[i] * s1 - scale[j] * 0.25 * other.length
                    queue.append(j)
        self.station_offset = off
        self.station_scale = scale
        self.wrap = float(wrap)

        self.dead_end = np.zeros(n, dtype=np.bool_)
        for i, lane in enumerate(self.lanes):
            if lane.successor is None:
                for nb in (lane.left, lane.right):
                    if nb is not None and self.lane(nb).successor is not None:
                        self.dead_end[i] = True

        pts = np.vstack([l.centerline for l in self.lanes])
        cum = np.concatenate([l.cum for l in self.lanes])
        npts = np.array([len(l.centerline) for l in self.lanes], dtype=np.int64)
        start = np.concatenate([[0], np.cumsum(npts)[:-1]]).astype(np.int64)

        def ref(v):
            return -1 if v is None else idx[v]

        lanef = np.column_stack([
            [l.length for l in self.lanes],
            [l.speed_limit for l in self.lanes],
            self.station_offset,
            self.station_scale,
        ])
        lanei = np.column_stack([
            start,
            npts,
            [ref(l.left) for l in self.lanes],
            [ref(l.right) for l in self.lanes],
            [ref(l.successor) for l in self.lanes],
            self.dead_end.astype(np.int64),
            self.corridor,
        ]).astype(np.int64)
        self.geo = (np.ascontiguousarray(np.column_stack([pts, cum])), np.ascontiguousarray(lanef),
                    np.ascontiguousarray(lanei), self.wrap)

    # -- queries -----------------------------------------------------------
    def lane(self, lane_id) -> Lane:
        try:
            return self.lanes[self.index[lane_id]]
        except KeyError:
            raise MapError(f"unknown lane {lane_id}") from None

    def lane_ids(self):
        return [l.id for l in self.lanes]

    def neighbor(self, lane_id, lateral) -> Optional[int]:
        lane = self.lane(lane_id)
        if lateral == Lateral.LCL:
            return lane.left
        if lateral == Lateral.LCR:
            return lane.right
        return lane_id

    def is_exit(self, lane_id) -> bool:
        lane = self.lane(lane_id)
        return lane.successor is None and not self.dead_end[self.index[lane_id]]


# --------------------------------------------------------------------------
# vehicles and worlds


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    velocity: float
    acceleration: float = 0.0
    steering: float = 0.0
    curvature: float = 0.0

    def __post_init__(self):
        if self.velocity < 0:
            raise ValueError(f"velocity must be nonnegative, got {self.velocity}")

    @property
    def position(self):
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class VehicleParams:
    id: int
    length: float = 4.8
    width: float = 1.9
    wheelbase: float = 2.8
    max_accel: float = 2.0
    max_decel: float = 2.5
    desired_velocity: float = 15.0

    def __post_init__(self):
        if not self.length > self.wheelbase > 0:
            raise ValueError("need length > wheelbase > 0")
        if self.max_accel <= 0 or self.max_decel <= 0:
            raise ValueError("acceleration bounds must be positive")


@dataclass(frozen=True)
class Vehicle:
    params: VehicleParams
    state: VehicleState

    @property
    def id(self):
        return self.params.id


@dataclass(frozen=True)
class WorldState:
    time: float
    lane_map: LaneMap
    vehicles: tuple
    ego_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        ids = [v.id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate vehicle ids")

    @cached_property
    def ids(self):
        return [v.id for v in self.vehicles]

    def vehicle(self, vid) -> Vehicle:
        for v in self.vehicles:
            if v.id == vid:
                return v
        raise KeyError(vid)

    @property
    def ego(self) -> Vehicle:
        return self.vehicle(self.ego_id)

    @property
    def agents(self):
        return [v for v in self.vehicles if v.id != self.ego_id]

    @cached_property
    def located(self):
        """Per-vehicle ``(lane_index, s, d, station)`` from nearest-lane attribution."""
        geo = self.lane_map.geo
        out = {}
        for v in self.vehicles:
            li, s, d, _ = K.locate(geo, v.state.x, v.state.y)
            sta = K.station(geo, li, s)
            if self.lane_map.wrap > 0:
                sta %= self.lane_map.wrap
            out[v.id] = (int(li), float(s), float(d), float(sta))
        return out

    def lane_of(self, vid) -> int:
        return self.lane_map.lanes[self.located[vid][0]].id

    def with_vehicles(self, vehicles, time=None):
        return WorldState(self.time if time is None else time, self.lane_map, vehicles, self.ego_id)


@dataclass(frozen=True)
class FrenetPose:
    lane_id: int
    s: float
    d: float
    heading_error: float = 0.0


def frenet_project(point, lane: Lane, heading=None, max_offset=10.0) -> FrenetPose:
    """Nearest-point projection of ``point`` onto ``lane``."""
    p = np.asarray(point, dtype=float)
    s, d, dist, k, t = _project_extended(lane.centerline, lane.cum, p)
    closed = np.hypot(*(lane.centerline[-1] - lane.centerline[0])) < 1e-9
    seglen = lane.cum[k + 1] - lane.cum[k]
    overshoot = 0.0
    if k == 0 and t < 0:
        overshoot = -t * seglen
    elif k == len(lane.cum) - 2 and t > 1:
        overshoot = (t - 1) * seglen
    if overshoot > 1.0 and not closed:
        raise ProjectionOutOfRange(f"point {p.tolist()} projects past the end of lane {lane.id}")
    if abs(d) > max_offset:
        raise ProjectionOutOfRange(f"offset {d:.2f} m from lane {lane.id} exceeds {max_offset} m")
    s = min(max(s, 0.0), lane.length)
    herr = 0.0
    if heading is not None:
        e = lane.centerline[k + 1] - lane.centerline[k]
        herr = math.remainder(heading - math.atan2(e[1], e[0]), 2 * math.pi)
    return FrenetPose(lane.id, float(s), float(d), herr)


def reconstruct(pose: FrenetPose, lane: Lane):
    p, tan = lane.point_at(pose.s)
    return p + pose.d * np.array([-tan[1], tan[0]])


def surrounding_vehicles(world: WorldState, ref_vehicle, lane_id):
    """Leader and follower of ``ref_vehicle`` along ``lane_id``'s corridor.

    Vehicles count when they are attributed to a lane of the same successor
    chain.  Gaps are bumper to bumper.
    """
    lm = world.lane_map
    corr = lm.corridor[lm.index[lane_id]]
    li_ref, _, _, sta_ref = world.located[ref_vehicle]
    scale = lm.station_scale[lm.index[lane_id]]
    half_ref = world.vehicle(ref_vehicle).params.length / 2
    lead = follow = None
    for v in world.vehicles:
        if v.id == ref_vehicle:
            continue
        li, _, _, sta = world.located[v.id]
        if lm.corridor[li] != corr:
            continue
        ds = K.wrapd(sta - sta_ref, lm.wrap) / scale
        gap = abs(ds) - half_ref - v.params.length / 2
        if ds > 0 and (lead is None or ds < lead[2]):
            lead = (v.id, gap, ds)
        elif ds < 0 and (follow is None or -ds < follow[2]):
            follow = (v.id, gap, -ds)
    return {
        "leader": None if lead is None else (lead[0], lead[1]),
        "follower": None if follow is None else (follow[0], follow[1]),
    }


def target_lane_for(action, current_lane, lane_map: LaneMap) -> int:
    lat = action.lateral if isinstance(action, SemanticAction) else Lateral(action)
    tl = lane_map.neighbor(current_lane, lat)
    if tl is None:
        raise NoSuchNeighbor(f"lane {current_lane} has no neighbor for {lat.name}")
    return tl


# --------------------------------------------------------------------------
# logs

FRAME_KEYS = ("id", "x", "y", "heading", "velocity")


def read_log(path):
    """Parse a JSON-lines frame log; each frame is validated and time-ordered."""
    frames = []
    try:
        fh = open(path)
    except OSError as exc:
        raise MalformedLog(f"cannot open {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                frame = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLog(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(frame, dict) or "timestamp" not in frame or "vehicles" not in frame:
                raise MalformedLog("frame needs 'timestamp' and 'vehicles'", lineno)
            for v in frame["vehicles"]:
                missing = [k for k in FRAME_KEYS if k not in v]
                if missing:
                    raise MalformedLog(f"vehicle entry missing {missing}", lineno)
                if v["velocity"] < 0:
                    raise MalformedLog("negative velocity", lineno)
            if frames and frame["timestamp"] <= frames[-1][1]["timestamp"]:
                raise MalformedLog("timestamps must be strictly increasing", lineno)
            frames.append((lineno, frame))
    if not frames:
        raise EmptyLog(f"{path} contains no frames")
    return [f for _, f in frames]


def world_from_frame(frame, lane_map, params=None, ego_id=None) -> WorldState:
    """Build a ``WorldState`` from one log frame.  ``params`` maps id -> VehicleParams."""
    params = params or {}
    vehicles = []
    for v in frame["vehicles"]:
        vid = int(v["id"])
        p = params.get(vid) or VehicleParams(vid)
        vehicles.append(
            Vehicle(
                p,
                VehicleState(
                    float(v["x"]), float(v["y"]), float(v["heading"]), float(v["velocity"]),
                    float(v.get("acceleration", 0.0)), float(v.get("steering", 0.0)),
                    float(v.get("curvature", 0.0)),
                ),
            )
        )
    if ego_id is None:
        ego_id = int(frame.get("ego", 0))
    return WorldState(float(frame["timestamp"]), lane_map, vehicles, ego_id)


def frame_from_world(world: WorldState, **extra):
    frame = {
        "timestamp": round(world.time, 6),
        "ego": world.ego_id,
        "vehicles": [
            {
                "id": v.id,
                "x": v.state.x,
                "y": v.state.y,
                "heading": v.state.heading,
                "velocity": v.state.velocity,
                "acceleration": v.state.acceleration,
                "steering": v.state.steering,
                "curvature": v.state.curvature,
                "length": v.params.length,
                "width": v.params.width,
            }
            for v in world.vehicles
        ],
    }
    frame.update(extra)
    return frame
