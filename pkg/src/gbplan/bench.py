"""Benchmark orchestration: scenario suites x planner modes x seeds."""

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .planner import PlannerConfig
from .sim_env import ScenarioConfig, double_merge_scenario, reseed, ring_scenario, run_episode

COLUMNS = ["map", "mode", "seed", "safety", "avg_vel", "ud_per_km", "lcc_per_km", "collisions",
           "distance", "reason"]
METRIC_COLUMNS = ["safety", "avg_vel", "ud_per_km", "lcc_per_km", "collisions"]


# dense, slow merging traffic: agents want 70% of the limit and enter every ~3 s per lane
DOUBLE_MERGE_TRAFFIC = {"density": 1.5, "inflow": 0.3, "speed_factor": 0.7}


def default_suite(maps=("double_merge", "ring"), planner=None, duration=None):
    """The benchmark scenarios, seeded at 0; planning at 5 Hz keeps episodes affordable."""
    planner = planner or PlannerConfig(replan_dt=0.2)
    builders = {"double_merge": lambda: double_merge_scenario(0, planner=planner, **DOUBLE_MERGE_TRAFFIC),
                "ring": lambda: ring_scenario(0, planner=planner)}
    suite = []
    for m in maps:
        if m not in builders:
            raise ValueError(f"unknown benchmark map {m!r}")
        cfg = builders[m]()
        suite.append(cfg if duration is None else replace(cfg, duration=duration))
    return suite


@dataclass(frozen=True)
class Job:
    cfg: ScenarioConfig
    map: str
    mode: str
    seed: int


def _run(job: Job):
    try:
        ep = run_episode(job.cfg)
    except Exception as exc:  # a failed episode becomes a recorded row
        return {"map": job.map, "mode": job.mode, "seed": job.seed, "safety": float("nan"),
                "avg_vel": float("nan"), "ud_per_km": float("nan"), "lcc_per_km": float("nan"),
                "collisions": 0, "distance": 0.0, "reason": f"error: {type(exc).__name__}: {exc}"}
    m = ep.metrics
    return {"map": job.map, "mode": job.mode, "seed": job.seed, "safety": m.safety_fraction,
            "avg_vel": m.avg_velocity, "ud_per_km": m.ud_per_km, "lcc_per_km": m.lcc_per_km,
            "collisions": m.collisions, "distance": m.distance, "reason": ep.reason}


def jobs_for(suite, modes, repetitions, seed0=None):
    out = []
    for cfg in suite:
        base = cfg.seed if seed0 is None else seed0
        for mode in modes:
            for r in range(repetitions):
                c = reseed(cfg, base + r, mode)
                out.append(Job(c, cfg.name, mode, base + r))
    return out


def run_benchmark(suite, modes=("MPDM", "EDM", "EUDM"), repetitions=10, workers=1, seed0=None,
                  progress=None):
    """One row per (scenario, mode, seed); repetitions use seeds ``seed0 .. seed0+repetitions-1``."""
    if not suite:
        raise ValueError("benchmark suite is empty")
    jobs = jobs_for(suite, modes, repetitions, seed0)
    rows = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for row in pool.map(_run, jobs):
                rows.append(row)
                if progress:
                    progress(row)
    else:
        for job in jobs:
            rows.append(_run(job))
            if progress:
                progress(rows[-1])
    return rows


def write_csv(rows, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in COLUMNS])
    text = buf.getvalue()
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def read_csv(path_or_text):
    if "\n" in path_or_text:
        text = path_or_text
    else:
        with open(path_or_text) as fh:
            text = fh.read()
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = dict(rec)
        row["seed"] = int(row["seed"])
        row["collisions"] = int(row["collisions"])
        for c in ("safety", "avg_vel", "ud_per_km", "lcc_per_km", "distance"):
            row[c] = float(row[c])
        rows.append(row)
    return rows


def summarize(rows):
    """Mean metrics per (map, mode), in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault((r["map"], r["mode"]), []).append(r)
    out = []
    for (mp, mode), rs in groups.items():
        ok = [r for r in rs if not r["reason"].startswith("error")]
        agg = {"map": mp, "mode": mode, "episodes": len(rs), "failed": len(rs) - len(ok)}
        for c in METRIC_COLUMNS + ["distance"]:
            agg[c] = float(np.mean([r[c] for r in ok])) if ok else float("nan")
        agg["collisions"] = int(sum(r["collisions"] for r in ok))
        out.append(agg)
    return out


def markdown(summary):
    lines = ["| Map | Method | Safety | Avg. vel (m/s) | UD (1/km) | LCC (1/km) | Collisions | Episodes |",
             "|---|---|---|---|---|---|---|---|"]
    for s in summary:
        lines.append(f"| {s['map']} | {s['mode']} | {s['safety']:.3f} | {s['avg_vel']:.2f} | "
                     f"{s['ud_per_km']:.2f} | {s['lcc_per_km']:.2f} | {s['collisions']} | {s['episodes']} |")
    return "\n".join(lines) + "\n"
