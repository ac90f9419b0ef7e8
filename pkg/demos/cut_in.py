"""A neighbour that may or may not cut in.

The belief puts 45% on a right lane change into the ego lane.  The MAP
scenario (keep lane) hides that risk, so EDM plans as if the road were clear.
EUDM keeps the insertion branch and stays behind it.

    python demos/cut_in.py
"""

from dataclasses import replace

from gbplan.cfb import Scenario
from gbplan.planner import PlannerConfig, plan_once, rollout_scenario
from gbplan.scenes import cut_in_scene
from gbplan.world import Lateral


def main():
    world, beliefs, ongoing = cut_in_scene()
    cfg = PlannerConfig()
    insert = Scenario({1: Lateral.LCR}, 1.0)
    for mode in ("EDM", "EUDM"):
        res = plan_once(world, beliefs, ongoing, replace(cfg, mode=mode))
        ev = res.best_evaluation
        branches = ", ".join(f"{dict((k, v.name) for k, v in s.assignment)} p={s.probability:.2f}"
                             for s in ev.scenarios)
        gap = rollout_scenario(world, insert, res.best, cfg).min_gap.min()
        print(f"{mode:5s} first decision {res.best.actions[1].longitudinal.name:10s} "
              f"min gap if it cuts in {gap:5.2f} m")
        print(f"      scenarios: {branches}")


if __name__ == "__main__":
    main()
