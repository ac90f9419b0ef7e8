"""Benchmark and test maps."""

import numpy as np

from .world import Lane, LaneMap

LANE_WIDTH = 3.5


def _line(x0, x1, y, spacing=1.0):
    n = max(2, int(np.ceil((x1 - x0) / spacing)) + 1)
    xs = np.linspace(x0, x1, n)
    return np.column_stack([xs, np.full(n, y)])


def straight_road(n_lanes=2, length=400.0, width=LANE_WIDTH, speed_limit=15.0):
    """Parallel straight lanes along +x; lane 0 is rightmost, ids grow to the left."""
    lanes = []
    for i in range(n_lanes):
        lanes.append(Lane(
            id=i,
            centerline=_line(0.0, length, i * width),
            left=i + 1 if i + 1 < n_lanes else None,
            right=i - 1 if i > 0 else None,
            speed_limit=speed_limit,
        ))
    return LaneMap(lanes)


def ring_map(radius=120.0, width=LANE_WIDTH, speed_limit=15.0, n_points=512):
    """Two-lane counter-clockwise loop.  Lane 0 is outer (right), lane 1 inner."""
    ang = np.linspace(0.0, 2 * np.pi, n_points, endpoint=False)

    def circle(r):
        return np.column_stack([r * np.cos(ang), r * np.sin(ang)])

    lanes = [
        Lane(0, circle(radius + width), left=1, successor=0, speed_limit=speed_limit),
        Lane(1, circle(radius), right=0, successor=1, speed_limit=speed_limit),
    ]
    return LaneMap(lanes, ring=True)


def double_merge_map(width=LANE_WIDTH, speed_limit=12.0, merge_start=225.0, merge_end=375.0,
                     length=600.0):
    """Three lanes squeezed into two and widened back to three.

    The rightmost upstream lane (id 0) ends at ``merge_start`` and must merge
    left; the shared two-lane section runs to ``merge_end`` where a new right
    lane (id 20) opens, so traffic both merges in and weaves out within
    ``merge_end - merge_start`` metres.
    """
    w = width
    lanes = [
        Lane(0, _line(0, merge_start, 0.0), left=1, speed_limit=speed_limit),
        Lane(1, _line(0, merge_start, w), left=2, right=0, successor=11, speed_limit=speed_limit),
        Lane(2, _line(0, merge_start, 2 * w), right=1, successor=12, speed_limit=speed_limit),
        Lane(11, _line(merge_start, merge_end, w), left=12, successor=21, speed_limit=speed_limit),
        Lane(12, _line(merge_start, merge_end, 2 * w), right=11, successor=22, speed_limit=speed_limit),
        Lane(20, _line(merge_end, length, 0.0), left=21, speed_limit=speed_limit),
        Lane(21, _line(merge_end, length, w), left=22, right=20, speed_limit=speed_limit),
        Lane(22, _line(merge_end, length, 2 * w), right=21, speed_limit=speed_limit),
    ]
    return LaneMap(lanes)
