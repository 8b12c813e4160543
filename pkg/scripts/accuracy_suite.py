"""Hough relative-rotation error over seeded synthetic chunks.

    python3 scripts/accuracy_suite.py --seeds 50 --duration-ms 100
"""

import argparse
import time

import numpy as np

from evstar.geom import angular_distance
from evstar.hough import run_chunk
from evstar.suite import suite_case, suite_hough


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--duration-ms", type=int, default=100)
    args = ap.parse_args()

    errs = []
    t0 = time.perf_counter()
    for s in range(args.seeds):
        case = suite_case(s, args.duration_ms * 1000)
        est = run_chunk(case.chunk, case.intrinsics, suite_hough(args.duration_ms))
        errs.append(np.rad2deg(angular_distance(est.R, case.R_true)))
        print(f"seed {s:3d}  {len(case.chunk.events):6d} events  error {errs[-1]:.4f} deg")
    errs = np.array(errs)
    print(f"\nmedian {np.median(errs):.3f} deg  p95 {np.percentile(errs, 95):.3f} deg  max {errs.max():.3f} deg"
          f"  ({time.perf_counter() - t0:.1f} s)")


if __name__ == "__main__":
    main()
