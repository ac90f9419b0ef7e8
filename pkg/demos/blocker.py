"""Overtaking a slow leader when a blocker sits in the target lane.

The flat planner (one action held for the whole horizon) can only compare
"change now" with "never change", and changing now hits the blocker.  The
tree planner can hold the lane first and change once the blocker is behind.

    python demos/blocker.py
"""

from dataclasses import replace

from gbplan.planner import PlannerConfig, plan_once
from gbplan.scenes import blocker_scene


def describe(seq):
    return " -> ".join(f"{a.lateral.name}/{a.longitudinal.name}" for a in seq.actions)


def main():
    world, beliefs, ongoing = blocker_scene()
    for mode in ("MPDM", "EDM", "EUDM"):
        res = plan_once(world, beliefs, ongoing, replace(PlannerConfig(), mode=mode))
        ev = res.best_evaluation
        print(f"{mode:5s} reward {ev.weighted_reward:8.3f}  {describe(res.best)}")
        end = ev.rollouts[0].frames[-1]
        print(f"      after 8 s: ego x {end[0, 0]:.1f} m, blocker x {end[1, 0]:.1f} m, "
              f"leader x {end[2, 0]:.1f} m")


if __name__ == "__main__":
    main()
