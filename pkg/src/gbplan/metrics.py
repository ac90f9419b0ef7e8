"""Episode metrics: safety fraction, speed and comfort event rates."""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels as K
from .errors import EmptyLog
from .models import RssParams


@dataclass(frozen=True)
class Thresholds:
    ud_decel: float = 1.6
    lcc_rate: float = 0.12
    # a frame is unsafe when an agent is closer than max(min_gap, rss_factor * RSS gap)
    min_gap: float = 2.0
    rss_factor: float = 0.5
    rss: RssParams = RssParams()


@dataclass
class BenchmarkMetrics:
    safety_fraction: float
    avg_velocity: float
    ud_per_km: float
    lcc_per_km: float
    distance: float
    collisions: int
    frames: int = 0
    ud_events: int = 0
    lcc_events: int = 0

    def to_json(self):
        return asdict(self)


def frame_arrays(frame, geo):
    """Packed (st, prm) for a log frame with the ego in row 0."""
    ego = int(frame.get("ego", 0))
    vs = sorted(frame["vehicles"], key=lambda v: (int(v["id"]) != ego, int(v["id"])))
    n = len(vs)
    st = np.zeros((n, K.NSTATE))
    prm = np.zeros((n, K.NPARAM))
    for i, v in enumerate(vs):
        st[i, K.X] = v["x"]
        st[i, K.Y] = v["y"]
        st[i, K.TH] = v["heading"]
        st[i, K.V] = v["velocity"]
        prm[i, K.P_LEN] = v.get("length", 4.8)
        prm[i, K.P_WID] = v.get("width", 1.9)
    K.locate_all(geo, st, n)
    return st, prm


def frame_flags(frame, lane_map, thr: Thresholds = Thresholds()):
    """``(unsafe, collision)`` for the ego in one frame."""
    if len(frame["vehicles"]) < 2:
        return False, False
    st, prm = frame_arrays(frame, lane_map.geo)
    unsafe, hit = K.frame_safety(lane_map.geo, st, prm, len(st), thr.rss.as_array(),
                                 thr.min_gap, thr.rss_factor)
    return bool(unsafe), bool(hit)


def _runs(mask):
    """Number of maximal runs of True."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return 0
    return int(mask[0]) + int(np.count_nonzero(mask[1:] & ~mask[:-1]))


def ego_series(frames):
    """Time, velocity, acceleration and curvature of the ego per frame."""
    t, v, a, k = [], [], [], []
    for f in frames:
        ego = int(f.get("ego", 0))
        e = next((x for x in f["vehicles"] if int(x["id"]) == ego), None)
        if e is None:
            raise EmptyLog(f"frame at t={f['timestamp']} has no ego vehicle")
        t.append(f["timestamp"])
        v.append(e["velocity"])
        a.append(e.get("acceleration", 0.0))
        k.append(e.get("curvature", 0.0))
    return np.array(t), np.array(v), np.array(a), np.array(k)


def compute_metrics(frames, lane_map=None, thresholds: Thresholds = Thresholds()) -> BenchmarkMetrics:
    """Metrics over an episode log (list of frames or a JSON-lines path).

    Without a lane map the safety flags stored in the frames are used;
    frames without stored flags count as safe.
    """
    if isinstance(frames, str):
        from .world import read_log
        frames = read_log(frames)
    if not frames:
        raise EmptyLog("episode log is empty")
    t, v, a, k = ego_series(frames)
    if lane_map is not None:
        flags = [frame_flags(f, lane_map, thresholds) for f in frames]
    else:
        flags = [(bool(f.get("unsafe", False)), bool(f.get("collision", False))) for f in frames]
    unsafe = np.array([u for u, _ in flags])
    hit = np.array([c for _, c in flags])
    distance = float(np.trapezoid(v, t)) / 1000.0 if len(t) > 1 else 0.0
    ud = _runs(a < -thresholds.ud_decel)
    if len(t) > 1:
        rate = np.abs(np.diff(k)) / np.diff(t)
        lcc = _runs(rate > thresholds.lcc_rate)
    else:
        lcc = 0
    per_km = (lambda c: c / distance) if distance > 0 else (lambda c: 0.0)
    return BenchmarkMetrics(
        safety_fraction=float(unsafe.mean()),
        avg_velocity=float(v.mean()),
        ud_per_km=float(per_km(ud)),
        lcc_per_km=float(per_km(lcc)),
        distance=distance,
        collisions=_runs(hit),
        frames=len(frames),
        ud_events=ud,
        lcc_events=lcc,
    )


def metrics_json(m: BenchmarkMetrics):
    return json.dumps(m.to_json(), sort_keys=True)
