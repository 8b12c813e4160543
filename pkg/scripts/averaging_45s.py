"""Anchored rotation averaging against dead reckoning on a 45 s plan with noisy edges.

    python3 scripts/averaging_45s.py --noise-deg 0.3 --anchors 5
"""

import argparse
import time

import numpy as np

from evstar.averaging import build_graph, chain_relatives, solve
from evstar.bank import BankConfig, plan_instances
from evstar.geom import angular_distance, exp_so3
from evstar.sim import MotionProfile


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--duration-s", type=float, default=45.0)
    ap.add_argument("--noise-deg", type=float, default=0.3)
    ap.add_argument("--anchors", type=int, default=5)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    dur = int(args.duration_s * 1e6)
    axis = rng.normal(size=3)
    prof = MotionProfile.constant(np.deg2rad(4.0) * axis / np.linalg.norm(axis), dur)

    def noisy(R):
        return exp_so3(rng.normal(scale=np.deg2rad(args.noise_deg) / np.sqrt(3), size=3)) @ R

    edges = []
    for w in plan_instances(dur, BankConfig()):
        Ra, Rb = prof.attitudes([w.alpha, w.beta])
        edges.append((w.alpha, w.beta, noisy(Ra @ Rb.T)))
    # anchor times land on the 50 ms grid
    anchor_t = sorted({int(round(t / 50_000)) * 50_000 for t in np.linspace(0, dur, args.anchors)})
    anchors = {t: noisy(prof.attitude(t)) for t in anchor_t}

    t0 = time.perf_counter()
    sol = solve(build_graph(edges, anchors))
    dt = time.perf_counter() - t0
    err = np.rad2deg([angular_distance(R, prof.attitude(int(t))) for t, R in zip(sol.times, sol.attitudes)])
    ch = chain_relatives([e for e in edges if e[1] - e[0] == 100_000], 0, anchors[0])
    cerr = np.rad2deg([angular_distance(R, prof.attitude(int(t))) for t, R in zip(ch.times, ch.attitudes)])
    even = sol.times % 100_000 == 0

    def rms(e):
        return float(np.sqrt(np.mean(np.square(e))))

    print(f"{len(edges)} edges, {len(sol.times)} nodes, anchors at {[t // 1000 for t in anchor_t]} ms")
    print(f"averaged RMS {rms(err):.3f} deg (100 ms nodes {rms(err[even]):.3f}, odd 50 ms nodes {rms(err[~even]):.3f})")
    print(f"chained  RMS {rms(cerr):.3f} deg")
    print(f"solve {dt:.2f} s, {sol.iterations} sweeps, converged={sol.converged}")


if __name__ == "__main__":
    main()
