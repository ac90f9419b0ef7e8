"""Command-line entry points: plan, sim, bench, replay, plot.

Every failure prints one JSON object on stderr and exits nonzero:
2 for bad input, 3 when an episode had to fall back to emergency braking.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import bench as B
from .belief import BeliefTracker
from .errors import EmptyLog, MalformedLog, MapError, NoFeasiblePolicy, OffMap, PlannerError
from .planner import Planner, PlannerConfig, plan_once
from .sim_env import ScenarioConfig, double_merge_scenario, load_map, ring_scenario, run_episode
from .world import SemanticAction, Lateral, Longitudinal, read_log, world_from_frame

EXIT_OK, EXIT_INPUT, EXIT_EMERGENCY = 0, 2, 3


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")
    return code


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno}") from None


def _planner_cfg(args, base=None):
    cfg = base or PlannerConfig()
    if getattr(args, "config", None) and base is None:
        cfg = PlannerConfig.from_json(_load_json(args.config))
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mode is not None:
        changes["mode"] = args.mode
    return replace(cfg, **changes) if changes else cfg


# --------------------------------------------------------------------------
# replay


def replay(frames, lane_map, cfg: PlannerConfig = PlannerConfig()):
    """Open-loop planner over recorded frames.

    Beliefs are updated from the observed states only; the planner's output
    never feeds back into the log.  Returns a JSON-serialisable report.
    """
    planner = Planner(cfg)
    out = []
    switches = 0
    prev = None
    for i, frame in enumerate(frames):
        world = world_from_frame(frame, lane_map)
        if world.ego_id not in world.ids:
            raise MalformedLog(f"frame {i} has no ego vehicle {world.ego_id}")
        res = planner.plan(world)
        seq = [[a.lateral.name, a.longitudinal.name] for a in res.best.actions]
        first = tuple(seq[0])
        if prev is not None and first != prev:
            switches += 1
        prev = first
        ev = res.best_evaluation
        # vehicles whose hypothesised intention made the selected sequence fail the open-loop check
        risky = sorted(ev.cfb.failing) if res.risky_detected else []
        out.append({
            "timestamp": frame["timestamp"],
            "sequence": seq,
            "emergency": res.emergency,
            "risky": risky,
            "scenarios": [s.to_json() for s in ev.scenarios] if ev else [],
            "latency_ms": round(1000.0 * res.latency, 3),
        })
    lat = [f["latency_ms"] for f in out]
    return {
        "frames": out,
        "switches": switches,
        "risky_frames": sum(1 for f in out if f["risky"]),
        "latency_ms": {"median": float(np.median(lat)), "max": float(np.max(lat))} if lat else {},
    }


def strip_latency(report):
    """Report without wall-clock fields, for reproducibility comparisons."""
    r = dict(report)
    r.pop("latency_ms", None)
    r["frames"] = [{k: v for k, v in f.items() if k != "latency_ms"} for f in report["frames"]]
    return r


# --------------------------------------------------------------------------
# commands


def _map_from(args, frames=None):
    source = args.map
    if source is None and frames:
        source = (frames[0].get("meta") or {}).get("map")
    if source is None:
        raise InputError("no map given (use --map)")
    return load_map(source)


def cmd_plan(args):
    doc = _load_json(args.scene)
    frame = doc.get("frame", doc)
    if "vehicles" not in frame:
        raise InputError("scene needs a 'frame' with 'vehicles'")
    if args.map is None and "map" in doc:
        lane_map = load_map(doc["map"]) if isinstance(doc["map"], str) else _inline_map(doc["map"])
    else:
        lane_map = _map_from(args)
    base = PlannerConfig.from_json(doc["planner"]) if "planner" in doc and not args.config else None
    cfg = _planner_cfg(args, base)
    world = world_from_frame(frame, lane_map)
    beliefs = BeliefTracker(cfg.belief).update(world)
    ongoing = SemanticAction(Lateral.LK, Longitudinal.MAINTAIN, cfg.node_duration)
    try:
        res = plan_once(world, beliefs, ongoing, cfg)
    except NoFeasiblePolicy as exc:
        return _fail(EXIT_EMERGENCY, "NoFeasiblePolicy", exc)
    entry = res.to_log()
    entry.pop("latency", None)
    _emit(entry, args.out)
    return EXIT_OK


def _inline_map(doc):
    from .world import LaneMap
    return LaneMap.from_json(doc)


def _emit(obj, out):
    text = json.dumps(obj, sort_keys=True)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _scenario(args):
    if args.config:
        cfg = ScenarioConfig.from_json(_load_json(args.config))
    else:
        name = args.map or "double_merge"
        if name == "ring":
            cfg = ring_scenario(args.seed or 0)
        elif name == "double_merge":
            cfg = double_merge_scenario(args.seed or 0, **B.DOUBLE_MERGE_TRAFFIC)
        else:
            raise InputError("without --config, --map must be 'ring' or 'double_merge'")
    planner = cfg.planner
    if args.mode is not None:
        planner = replace(planner, mode=args.mode)
    if args.replan_dt is not None:
        planner = replace(planner, replan_dt=args.replan_dt)
    cfg = replace(cfg, planner=planner)
    if args.seed is not None:
        from .sim_env import reseed
        cfg = reseed(cfg, args.seed)
    if args.duration is not None:
        cfg = replace(cfg, duration=args.duration)
    return cfg


def cmd_sim(args):
    cfg = _scenario(args)
    ep = run_episode(cfg)
    if args.out:
        ep.write_log(args.out)
    summary = {"scenario": cfg.name, "mode": cfg.planner.mode, "seed": cfg.seed, "reason": ep.reason,
               "emergencies": ep.emergencies, "metrics": ep.metrics.to_json()}
    print(json.dumps(summary, sort_keys=True))
    if ep.emergencies:
        return _fail(EXIT_EMERGENCY, "NoFeasiblePolicy",
                     f"{ep.emergencies} planning cycles fell back to emergency braking")
    return EXIT_OK


def cmd_bench(args):
    if args.from_csv:
        rows = B.read_csv(args.from_csv)
        sys.stdout.write(B.markdown(B.summarize(rows)))
        return EXIT_OK
    planner = PlannerConfig(replan_dt=args.replan_dt or 0.2)
    maps = [args.map] if args.map else ["double_merge", "ring"]
    try:
        suite = B.default_suite(maps, planner, args.duration)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    modes = [args.mode.upper()] if args.mode else ["MPDM", "EDM", "EUDM"]
    rows = B.run_benchmark(suite, modes, args.episodes, workers=args.workers,
                           seed0=args.seed if args.seed is not None else 0)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    B.write_csv(rows, os.path.join(out, "results.csv"))
    md = B.markdown(B.summarize(rows))
    with open(os.path.join(out, "summary.md"), "w") as fh:
        fh.write(md)
    sys.stdout.write(md)
    return EXIT_OK


def cmd_replay(args):
    frames = read_log(args.log)
    lane_map = _map_from(args, frames)
    cfg = _planner_cfg(args)
    report = replay(frames, lane_map, cfg)
    _emit(report, args.out)
    return EXIT_OK


def cmd_plot(args):
    from .plot import plot_log, velocity_distance
    frames = read_log(args.log)
    try:
        lane_map = _map_from(args, frames)
    except InputError:
        lane_map = None
    stem = os.path.splitext(os.path.basename(args.log))[0]
    paths, strip = plot_log(frames, args.out or ".", args.keyframes, lane_map, stem)
    print(json.dumps({"keyframes": paths, "metrics": strip,
                      "velocity_distance": velocity_distance(frames)}, sort_keys=True))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="gbplan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="JSON document (planner or scenario config)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", type=str.upper, choices=["EUDM", "EDM", "MPDM"])
        sp.add_argument("--map", help="builtin map name or JSON map path")
        sp.add_argument("--out", help="output path")

    sp = sub.add_parser("plan", help="one planning cycle on a scene file")
    sp.add_argument("scene")
    common(sp)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("sim", help="run one closed-loop episode")
    common(sp)
    sp.add_argument("--duration", type=float)
    sp.add_argument("--replan-dt", dest="replan_dt", type=float)
    sp.set_defaults(func=cmd_sim)

    sp = sub.add_parser("bench", help="run the benchmark suite")
    common(sp)
    sp.add_argument("--episodes", type=int, default=10, help="seeds per (map, mode)")
    sp.add_argument("--duration", type=float)
    sp.add_argument("--replan-dt", dest="replan_dt", type=float)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--from-csv", dest="from_csv", help="summarize an existing results CSV")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("replay", help="open-loop planner over a recorded log")
    sp.add_argument("log")
    common(sp)
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("plot", help="render a log to SVG")
    sp.add_argument("log")
    common(sp)
    sp.add_argument("--keyframes", type=int, default=4)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except InputError as exc:
        return _fail(EXIT_INPUT, "InputError", exc)
    except MalformedLog as exc:
        return _fail(EXIT_INPUT, "MalformedLog", exc)
    except (EmptyLog, MapError, OffMap) as exc:
        return _fail(EXIT_INPUT, type(exc).__name__, exc)
    except NoFeasiblePolicy as exc:
        return _fail(EXIT_EMERGENCY, "NoFeasiblePolicy", exc)
    except PlannerError as exc:
        return _fail(EXIT_INPUT, type(exc).__name__, exc)
    except (ValueError, TypeError, KeyError) as exc:
        return _fail(EXIT_INPUT, "InvalidInput", exc)


if __name__ == "__main__":
    sys.exit(main())
