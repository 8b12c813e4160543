"""Per-chunk wall time of the Hough estimator against contrast maximisation.

    python3 scripts/timing_ht_vs_cm.py --cases 2 --durations 100,200,400
"""

import argparse

from evstar.metrics import benchmark
from evstar.sim import DEFAULT_INTRINSICS
from evstar.suite import suite_case, suite_hough


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cases", type=int, default=2)
    ap.add_argument("--durations", default="100,200,400")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    durations = [int(d) for d in args.durations.split(",")]
    chunks = [suite_case(s, d * 1000).chunk for d in durations for s in range(args.cases)]
    ht = {r.duration_ms: r.seconds_per_chunk
          for r in benchmark("ht", chunks, DEFAULT_INTRINSICS, hough_config=suite_hough, repeats=args.repeats)}
    cm = {r.duration_ms: r.seconds_per_chunk for r in benchmark("cm", chunks, DEFAULT_INTRINSICS, repeats=args.repeats)}

    print(f"{'ms':>6} {'HT s':>8} {'CM s':>8} {'CM/HT':>6}")
    for d in durations:
        print(f"{d:6d} {ht[d]:8.3f} {cm[d]:8.3f} {cm[d] / ht[d]:6.1f}")
    lo, hi = durations[0], durations[-1]
    print(f"growth {lo}->{hi} ms: HT x{ht[hi] / ht[lo]:.2f}, CM x{cm[hi] / cm[lo]:.2f}")


if __name__ == "__main__":
    main()
