"""Accuracy of relative and absolute estimates against ground truth, and runtime benchmarks."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .geom import angular_distance


def rms(errors) -> float:
    """Root mean square; 0 for an empty sequence."""
    e = np.asarray(errors, dtype=float)
    return float(np.sqrt(np.mean(e * e))) if e.size else 0.0


def root_sum_squares(errors) -> float:
    e = np.asarray(errors, dtype=float)
    return float(np.sqrt(np.sum(e * e)))


@dataclass
class RelativeReport:
    alpha: np.ndarray
    beta: np.ndarray
    resolution_ms: np.ndarray
    errors_deg: np.ndarray

    def groups(self) -> dict[int, np.ndarray]:
        return {int(r): self.errors_deg[self.resolution_ms == r] for r in np.unique(self.resolution_ms)}

    def rms_by_resolution(self) -> dict[int, float]:
        return {r: rms(e) for r, e in self.groups().items()}

    @property
    def rms(self) -> float:
        return rms(self.errors_deg)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha_us", "beta_us", "resolution_ms", "error_deg"])
            for row in zip(self.alpha, self.beta, self.resolution_ms, self.errors_deg):
                w.writerow([int(row[0]), int(row[1]), int(row[2]), repr(float(row[3]))])

    def summary_rows(self) -> list[tuple]:
        """(resolution_ms, n, rms_deg, root_sum_squares_deg) per group."""
        return [(r, len(e), rms(e), root_sum_squares(e)) for r, e in self.groups().items()]


@dataclass
class AbsoluteReport:
    times: np.ndarray
    errors_deg: np.ndarray

    @property
    def rms(self) -> float:
        return rms(self.errors_deg)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_us", "error_deg"])
            for t, e in zip(self.times, self.errors_deg):
                w.writerow([int(t), repr(float(e))])


def _gt_attitude(gt, t: int) -> np.ndarray:
    if hasattr(gt, "attitude"):
        if hasattr(gt, "duration_us") and not 0 <= t <= gt.duration_us:
            raise KeyError(f"no ground truth at {t} us")
        return gt.attitude(int(t))
    if int(t) not in gt:
        raise KeyError(f"no ground truth at {t} us")
    return gt[int(t)]


def eval_relative(edges, gt) -> RelativeReport:
    """Angular error of every edge against ``R*(alpha) R*(beta)^T``.

    ``gt`` is a :class:`~evstar.sim.GroundTruth` or a mapping time -> attitude.
    Edges without ``resolution_ms`` are grouped by their duration.
    """
    a, b, res, err = [], [], [], []
    for e in edges:
        al, be, R = (e.alpha, e.beta, e.R) if hasattr(e, "alpha") else e
        r = getattr(e, "resolution_ms", 0) or (int(be) - int(al)) // 1000
        truth = _gt_attitude(gt, al) @ _gt_attitude(gt, be).T
        a.append(int(al)), b.append(int(be)), res.append(int(r))
        err.append(np.rad2deg(angular_distance(np.asarray(R), truth)))
    return RelativeReport(np.array(a, np.int64), np.array(b, np.int64), np.array(res, np.int64), np.array(err, float))


def eval_absolute(solution, gt, dt_us: int | None = None) -> AbsoluteReport:
    """Per-node angular error of an attitude solution (times must lie on the ground-truth grid)."""
    times = np.asarray(solution.times, dtype=np.int64)
    step = dt_us or getattr(gt, "dt_us", None)
    if step and np.any(times % step):
        raise ValueError(f"solution times are not on the {step} us grid")
    errs = [np.rad2deg(angular_distance(R, _gt_attitude(gt, t))) for t, R in zip(times, solution.attitudes)]
    return AbsoluteReport(times, np.array(errs, float))


@dataclass
class BenchmarkRow:
    method: str
    duration_ms: int
    n_chunks: int
    seconds_per_chunk: float  # mean over chunks of the per-chunk median
    per_chunk: list = field(default_factory=list)


def time_call(fn, repeats: int = 3) -> float:
    """Median wall time of ``repeats`` calls."""
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def benchmark(method: str, chunks, intrinsics, hough_config=None, cm_options=None, repeats: int = 3,
              warmup: bool = True) -> list[BenchmarkRow]:
    """Median-of-``repeats`` wall time per chunk, grouped by chunk duration.

    ``hough_config`` may be a config or a callable ``resolution_ms -> config``.
    """
    from .hough import run_chunk
    from .motion import cm_estimate

    method = method.lower()
    if method not in ("ht", "cm"):
        raise ValueError(f"unknown method {method!r}")
    chunks = list(chunks)

    def runner(ch):
        if method == "ht":
            cfg = hough_config(ch.duration_us // 1000) if callable(hough_config) else hough_config
            return lambda: run_chunk(ch, intrinsics, cfg)
        return lambda: cm_estimate(ch, intrinsics, cm_options)

    if warmup and chunks:
        runner(chunks[0])()
    by_dur: dict[int, list[float]] = {}
    for ch in chunks:
        by_dur.setdefault(ch.duration_us // 1000, []).append(time_call(runner(ch), repeats))
    return [BenchmarkRow(method.upper(), d, len(v), float(np.mean(v)), v) for d, v in sorted(by_dur.items())]


def write_benchmark_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "duration_ms", "n_chunks", "seconds_per_chunk"])
        for r in rows:
            w.writerow([r.method, r.duration_ms, r.n_chunks, f"{r.seconds_per_chunk:.6f}"])
