"""A short benchmark: three planners on both maps, a few seeds each.

The full suite (ten seeds, longer episodes) is what the acceptance test runs;
this version finishes in a few minutes on one core.

    python demos/benchmark.py [episodes] [duration_s]
"""

import sys

from gbplan import bench as B


def main(episodes=2, duration=20.0):
    suite = B.default_suite(duration=duration)
    rows = B.run_benchmark(suite, repetitions=episodes)
    print(B.markdown(B.summarize(rows)), end="")


if __name__ == "__main__":
    args = sys.argv[1:]
    main(int(args[0]) if args else 2, float(args[1]) if len(args) > 1 else 20.0)
