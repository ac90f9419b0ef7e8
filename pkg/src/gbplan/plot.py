"""SVG rendering of episode and replay logs."""

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from .errors import MalformedLog  # noqa: E402
from .metrics import ego_series  # noqa: E402
from .world import read_log  # noqa: E402

# deterministic SVG output: no timestamps, fixed element ids
plt.rcParams["svg.hashsalt"] = "gbplan"
plt.rcParams["svg.fonttype"] = "none"
_META = {"Date": None, "Creator": None}


def keyframe_indices(n_frames, count):
    if count < 1:
        raise ValueError("need at least one keyframe")
    if n_frames == 0:
        raise MalformedLog("log has no frames")
    return [int(round(i)) for i in np.linspace(0, n_frames - 1, count)]


def footprint(v):
    c, s = math.cos(v["heading"]), math.sin(v["heading"])
    hl, hw = 0.5 * v.get("length", 4.8), 0.5 * v.get("width", 1.9)
    corners = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
    return [(v["x"] + c * a - s * b, v["y"] + s * a + c * b) for a, b in corners]


def _draw_lanes(ax, lane_map):
    for lane in lane_map.lanes:
        pts = lane.centerline
        ax.plot(pts[:, 0], pts[:, 1], color="0.8", lw=0.6, zorder=0)


def render_frame(frame, path, lane_map=None, window=60.0):
    ego_id = int(frame.get("ego", 0))
    ego = next((v for v in frame["vehicles"] if int(v["id"]) == ego_id), None)
    fig, ax = plt.subplots(figsize=(8, 3))
    if lane_map is not None:
        _draw_lanes(ax, lane_map)
    for v in frame["vehicles"]:
        is_ego = int(v["id"]) == ego_id
        ax.add_patch(Polygon(footprint(v), closed=True, zorder=2,
                             fc="tab:red" if is_ego else "tab:blue", ec="k", lw=0.4))
    dec = frame.get("decision") or {}
    trace = dec.get("trace")
    if trace:
        tr = np.asarray(trace, dtype=float)
        ax.plot(tr[:, 0], tr[:, 1], color="tab:red", lw=1.0, ls="--", zorder=3)
    if ego is not None:
        ax.set_xlim(ego["x"] - window, ego["x"] + window)
        ax.set_ylim(ego["y"] - 0.4 * window, ego["y"] + 0.4 * window)
    ax.set_aspect("equal")
    title = f"t = {frame['timestamp']:.1f} s"
    if dec.get("sequence"):
        title += "   " + " ".join(f"{lat}/{lon[:3]}" for lat, lon in dec["sequence"])
    ax.set_title(title, fontsize=8)
    ax.tick_params(labelsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def render_metrics(frames, path):
    t, v, a, k = ego_series(frames)
    fig, axes = plt.subplots(3, 1, figsize=(8, 5), sharex=True)
    for ax, y, label in zip(axes, (v, a, k), ("v (m/s)", "a (m/s²)", "κ (1/m)")):
        ax.plot(t, y, lw=0.8)
        ax.set_ylabel(label, fontsize=7)
        ax.tick_params(labelsize=6)
    axes[-1].set_xlabel("t (s)", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def velocity_distance(frames):
    """Distance in metres from the trapezoid integral of the ego velocity."""
    t, v, _, _ = ego_series(frames)
    return float(np.trapezoid(v, t)) if len(t) > 1 else 0.0


def plot_log(log, out_dir, keyframes=4, lane_map=None, stem=None):
    """Write ``keyframes`` scene SVGs plus one metrics strip; returns the paths."""
    frames = read_log(log) if isinstance(log, str) else list(log)
    if not frames:
        raise MalformedLog("log has no frames")
    if stem is None:
        stem = os.path.splitext(os.path.basename(log))[0] if isinstance(log, str) else "episode"
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for n, i in enumerate(keyframe_indices(len(frames), keyframes)):
        p = os.path.join(out_dir, f"{stem}_key{n:02d}.svg")
        render_frame(frames[i], p, lane_map)
        paths.append(p)
    strip = os.path.join(out_dir, f"{stem}_metrics.svg")
    render_metrics(frames, strip)
    return paths, strip
