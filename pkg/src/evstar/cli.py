"""Command-line pipeline: simulate, track, average, compensate, benchmark, evaluate.

Every command writes into ``--out`` and leaves a ``manifest.json`` there that
``evstar rerun`` replays. Exit codes: 0 success, 2 usage error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_PIPELINE = 0, 2, 3
MANIFEST = "manifest.json"
_CONFIG_KEYS = {
    "subdivision_level", "delta", "delta_per_ms", "bin_size", "time_scale_ms", "eps_dir", "plane_half_extent",
    "resolutions_ms", "dt_ms", "anchor_weight", "max_iters", "tol", "kernel_sigma", "use_polarity",
}


class UsageError(Exception):
    pass


class PipelineError(Exception):
    pass


def version_string() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        v = version("evstar")
    except PackageNotFoundError:
        v = "0.0.0"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                              capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{v}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return v


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    inputs: dict
    outputs: list
    seed: int | None
    version: str
    wall_time_s: float = 0.0
    # outputs that legitimately differ between runs (wall-clock timings)
    volatile: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def write(self, out: Path) -> None:
        (out / MANIFEST).write_text(self.to_json())


# -- helpers -------------------------------------------------------------------------------


def _load_config(path) -> dict:
    if path is None:
        return {}
    from .fileio import read_kv

    try:
        kv = read_kv(path)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    unknown = sorted(set(kv) - _CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys {unknown}")
    return kv


def _hough_config(kv: dict, preset: str, resolution_ms: int | None = None):
    from .hough import HoughConfig
    from .suite import suite_hough

    base = suite_hough(resolution_ms or 100) if preset == "suite" else HoughConfig()
    hk = {k: v for k, v in kv.items() if k in {"subdivision_level", "delta", "bin_size", "time_scale_ms", "eps_dir",
                                               "plane_half_extent"}}
    if "delta_per_ms" in kv:
        if "delta" in kv:
            raise UsageError("give either delta or delta_per_ms, not both")
        try:
            hk["delta"] = max(2, int(round(float(kv["delta_per_ms"]) * (resolution_ms or 100))))
        except ValueError:
            raise UsageError(f"bad delta_per_ms {kv['delta_per_ms']!r}") from None
    if not hk:
        return base
    merged = {**{k: getattr(base, k) for k in ("subdivision_level", "delta", "bin_size", "time_scale_ms",
                                                 "eps_dir", "plane_half_extent")}, **hk}
    try:
        return HoughConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad Hough config: {exc}") from None


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _intrinsics(path):
    from .geom import CameraIntrinsics

    if path is None:
        raise UsageError("--intrinsics is required")
    try:
        return CameraIntrinsics.from_file(path)
    except OSError as exc:
        raise UsageError(f"cannot read intrinsics: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _events(path):
    from .events import EventParseError, parse_event_stream

    try:
        return parse_event_stream(path)
    except OSError as exc:
        raise UsageError(f"cannot read events: {exc}") from None
    except EventParseError as exc:
        raise UsageError(f"{path}: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _ground_truth(path) -> dict:
    from .fileio import read_rotations_csv

    try:
        t, R = read_rotations_csv(path)
    except OSError as exc:
        raise UsageError(f"cannot read ground truth: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return dict(zip(t.tolist(), R))


def _abspath(p) -> str | None:
    return None if p is None else str(Path(p).resolve())


# -- commands ------------------------------------------------------------------------------


def cmd_simulate(args, out: Path, kv: dict) -> dict:
    from .events import write_event_stream
    from .fileio import write_rotations_csv
    from .sim import MotionProfile, generate_events, generate_scene

    if not 0 <= args.outlier_ratio < 1:
        raise UsageError("--outlier-ratio must lie in [0, 1)")
    if args.stars < 1 or args.duration_s <= 0 or args.rate_hz <= 0 or args.noise_px < 0:
        raise UsageError("stars, duration and rate must be positive and noise non-negative")
    if not 0 < args.fov_deg <= 90:
        raise UsageError("--fov-deg must lie in (0, 90]")
    seed = args.seed or 0
    rng = np.random.default_rng(seed)
    if args.axis:
        axis = np.array([float(v) for v in args.axis.split(",")])
        if axis.shape != (3,) or not np.linalg.norm(axis) > 0:
            raise UsageError("--axis needs three comma-separated numbers, not all zero")
    else:
        axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)
    omega = np.deg2rad(args.omega_deg_s) * axis
    duration = int(round(args.duration_s * 1e6))
    dt_us = int(args.dt_ms) * 1000
    if args.profile == "wobble":
        profile = MotionProfile.wobble(omega, duration, int(args.wobble_period_s * 1e6))
    else:
        profile = MotionProfile.constant(omega, duration)
    scene = generate_scene(args.stars, args.fov_deg, seed=seed, min_separation_px=args.min_separation_px)
    sim = generate_events(scene, profile, duration, args.rate_hz, args.noise_px, args.outlier_ratio, seed=seed,
                          dt_us=dt_us)
    write_event_stream(out / "events.txt", sim.events, {"duration_us": duration})
    (out / "intrinsics.txt").write_text(scene.intrinsics.to_text())
    grid = sim.truth.grid
    write_rotations_csv(out / "groundtruth.csv", grid, profile.attitudes(grid))
    return {"outputs": ["events.txt", "intrinsics.txt", "groundtruth.csv"],
            "config": {"axis": axis.tolist(), "n_events": len(sim.events)}}


def _write_diagnostics(path, edges) -> None:
    with open(path, "w") as fh:
        fh.write("window_start_us,window_end_us,n_events,n_cells_over_delta,"
                 + ",".join(f"r{i}{j}" for i in range(3) for j in range(3)) + "\n")
        for e in edges:
            fh.write(f"{e.alpha},{e.beta},{e.n_events},{e.n_correspondences},"
                     + ",".join(repr(float(v)) for v in np.asarray(e.R).ravel()) + "\n")


def cmd_track(args, out: Path, kv: dict) -> dict:
    from .bank import BankConfig, DisconnectedGraphError, Edge, EdgeSet, plan_instances, run_bank
    from .events import chunk_stream
    from .motion import CMOptions, cm_estimate

    intr = _intrinsics(args.intrinsics)
    stream = _events(args.events)
    resolutions = _int_list(kv.get("resolutions_ms", args.resolutions_ms))
    dt_ms = int(kv.get("dt_ms", args.dt_ms))
    try:
        per = {r: _hough_config(kv, args.preset, r) for r in resolutions}
        config = BankConfig(resolutions, dt_ms, hough=per[min(per)], per_resolution=per)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    duration = int(stream.meta.get("duration_us", stream.t[-1]))
    failures = []
    if args.method == "ht":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            edges, bank = run_bank(stream, intr, config, duration)
        failures = [(w.alpha, w.beta, msg) for w, msg in bank.failures]
    else:
        opts = CMOptions()
        found = []
        for w in sorted(plan_instances(duration, config), key=lambda w: (w.alpha, w.beta)):
            ch = chunk_stream(stream, w.alpha, w.beta)
            if ch.empty:
                failures.append((w.alpha, w.beta, "empty window"))
                continue
            rr = cm_estimate(ch, intr, opts)
            found.append(Edge(w.alpha, w.beta, rr.R, w.resolution_ms, 0, len(ch)))
        edges = EdgeSet(found, config.dt_us)
    edges.to_csv(out / "edges.csv")
    _write_diagnostics(out / "diagnostics.csv", edges)
    with open(out / "failures.csv", "w") as fh:
        fh.write("window_start_us,window_end_us,reason\n")
        for a, b, msg in failures:
            fh.write(f"{a},{b},\"{msg}\"\n")
    counts = {}
    for e in edges:
        counts[e.resolution_ms] = counts.get(e.resolution_ms, 0) + 1
    try:
        edges.check_connected()
    except DisconnectedGraphError as exc:
        raise PipelineError(str(exc)) from None
    return {"outputs": ["edges.csv", "diagnostics.csv", "failures.csv"],
            "config": {"edges_per_resolution": {str(k): v for k, v in sorted(counts.items())}}}


def _anchors(path) -> dict:
    if path is None:
        return {}
    return _ground_truth(path)


def cmd_average(args, out: Path, kv: dict) -> dict:
    from .averaging import GraphError, build_graph, chain_relatives, solve, write_residuals_csv
    from .fileio import read_edges_csv

    try:
        edges = read_edges_csv(args.edges)
    except OSError as exc:
        raise UsageError(f"cannot read edges: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    anchors = _anchors(args.anchors)
    dt_us = int(kv.get("dt_ms", args.dt_ms)) * 1000
    weight = float(kv.get("anchor_weight", args.anchor_weight))
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            graph = build_graph(edges, anchors, dt_us, weight)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    except GraphError as exc:
        raise PipelineError(str(exc)) from None
    sol = solve(graph, int(kv.get("max_iters", args.max_iters)), float(kv.get("tol", args.tol)))
    sol.to_csv(out / "attitudes.csv")
    write_residuals_csv(out / "residuals.csv", graph, sol)
    outputs = ["attitudes.csv", "residuals.csv"]
    if args.chain and anchors:
        t0 = min(anchors)
        try:
            ch = chain_relatives(edges, t0, anchors[t0])
            ch.to_csv(out / "chained.csv")
            outputs.append("chained.csv")
        except GraphError as exc:
            print(f"warning: chaining baseline skipped: {exc}", file=sys.stderr)
    if not sol.converged:
        print(f"warning: averaging did not converge in {sol.iterations} sweeps", file=sys.stderr)
    return {"outputs": outputs, "config": {"iterations": sol.iterations, "converged": sol.converged,
                                           "n_nodes": graph.n_nodes, "n_edges": len(graph.edge_i)}}


def cmd_compensate(args, out: Path, kv: dict) -> dict:
    from .events import chunk_stream
    from .geom import log_so3
    from .hough import InsufficientCorrespondencesError, run_chunk
    from .motion import WarpParams, render_h_image, variance_contrast, write_pgm

    intr = _intrinsics(args.intrinsics)
    stream = _events(args.events)
    a, b = _int_list(args.window) if args.window else (0, 0)
    if not b > a:
        raise UsageError("--window needs ALPHA,BETA in microseconds with ALPHA < BETA")
    chunk = chunk_stream(stream, a, b)
    if chunk.empty:
        raise PipelineError(f"no events in [{a}, {b}]")
    if args.rotvec:
        w = np.array([float(v) for v in args.rotvec.split(",")])
        if w.shape != (3,):
            raise UsageError("--rotvec needs three numbers (radians)")
        source = "given"
    else:
        try:
            rr = run_chunk(chunk, intr, _hough_config(kv, args.preset, (b - a) // 1000))
        except InsufficientCorrespondencesError as exc:
            raise PipelineError(str(exc)) from None
        # the warp maps events back to alpha; the relative rotation maps beta rays to alpha
        w = log_so3(rr.R)
        source = "hough"
    sigma = float(kv.get("kernel_sigma", args.kernel_sigma))
    pol = str(kv.get("use_polarity", args.polarity)).lower() in ("1", "true", "on", "yes")
    before = render_h_image(chunk, WarpParams.from_rotvec(np.zeros(3), (a, b)), intr, sigma, pol)
    after = render_h_image(chunk, WarpParams.from_rotvec(w, (a, b)), intr, sigma, pol)
    write_pgm(out / "before.pgm", before.H)
    write_pgm(out / "after.pgm", after.H)
    vb, va = variance_contrast(before.H), variance_contrast(after.H)
    with open(out / "contrast.csv", "w") as fh:
        fh.write("image,variance,w0,w1,w2\n")
        fh.write(f"before,{vb!r},0.0,0.0,0.0\n")
        fh.write(f"after,{va!r}," + ",".join(repr(float(v)) for v in w) + "\n")
    return {"outputs": ["before.pgm", "before.pgm.scale", "after.pgm", "after.pgm.scale", "contrast.csv"],
            "config": {"rotvec_source": source}}


def cmd_benchmark(args, out: Path, kv: dict) -> dict:
    from .geom import angular_distance
    from .hough import run_chunk
    from .metrics import benchmark, write_benchmark_csv
    from .motion import cm_estimate
    from .suite import suite_case

    durations = _int_list(args.durations_ms)
    methods = [m.strip().lower() for m in args.methods.split(",")]
    if any(m not in ("ht", "cm") for m in methods):
        raise UsageError("--methods takes ht and/or cm")
    base = args.seed or 0
    cases = [suite_case(base + k, d * 1000) for d in durations for k in range(args.cases)]
    hcfg = lambda r: _hough_config(kv, args.preset, r)
    rows = []
    for m in methods:
        rows += benchmark(m, [c.chunk for c in cases], cases[0].intrinsics, hough_config=hcfg, repeats=args.repeats)
    write_benchmark_csv(out / "benchmark.csv", rows)
    with open(out / "estimates.csv", "w") as fh:
        fh.write("method,duration_ms,seed,error_deg\n")
        for m in methods:
            for c in cases:
                d = c.chunk.duration_us // 1000
                R = run_chunk(c.chunk, c.intrinsics, hcfg(d)).R if m == "ht" else cm_estimate(c.chunk, c.intrinsics).R
                fh.write(f"{m.upper()},{d},{c.seed},{float(np.rad2deg(angular_distance(R, c.R_true)))!r}\n")
    return {"outputs": ["benchmark.csv", "estimates.csv"], "volatile": ["benchmark.csv"]}


def cmd_evaluate(args, out: Path, kv: dict) -> dict:
    from .averaging import AttitudeSolution
    from .fileio import read_edges_csv, read_rotations_csv
    from .metrics import eval_absolute, eval_relative

    gt = _ground_truth(args.groundtruth)
    if not args.edges and not args.attitudes:
        raise UsageError("give --edges and/or --attitudes")
    outputs, lines = [], []
    try:
        if args.edges:
            rep = eval_relative(read_edges_csv(args.edges), gt)
            rep.to_csv(out / "relative_errors.csv")
            with open(out / "relative_summary.csv", "w") as fh:
                fh.write("resolution_ms,n,rms_deg,root_sum_squares_deg\n")
                for r, n, v, s in rep.summary_rows():
                    fh.write(f"{r},{n},{v!r},{s!r}\n")
                    lines.append(f"relative {r} ms: n={n} rms={v:.4f} deg")
            outputs += ["relative_errors.csv", "relative_summary.csv"]
        if args.attitudes:
            t, R = read_rotations_csv(args.attitudes)
            rep = eval_absolute(AttitudeSolution(t, R, np.eye(3)), gt)
            rep.to_csv(out / "absolute_errors.csv")
            lines.append(f"absolute: n={len(t)} rms={rep.rms:.4f} deg")
            outputs.append("absolute_errors.csv")
    except KeyError as exc:
        raise PipelineError(f"ground truth lacks time {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return {"outputs": outputs + ["summary.txt"]}


COMMANDS = {
    "simulate": cmd_simulate, "track": cmd_track, "average": cmd_average,
    "compensate": cmd_compensate, "benchmark": cmd_benchmark, "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", "-o", default="out", help="output directory")

    p = argparse.ArgumentParser(prog="evstar", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="synthetic star-field event stream")
    s.add_argument("--stars", type=int, default=20)
    s.add_argument("--fov-deg", type=float, default=30.0)
    s.add_argument("--omega-deg-s", type=float, default=4.0)
    s.add_argument("--axis", help="rotation axis x,y,z (random from the seed if omitted)")
    s.add_argument("--duration-s", type=float, default=1.0)
    s.add_argument("--rate-hz", type=float, default=1000.0, help="events per second per star")
    s.add_argument("--noise-px", type=float, default=0.5)
    s.add_argument("--outlier-ratio", type=float, default=0.05)
    s.add_argument("--min-separation-px", type=float, default=10.0)
    s.add_argument("--profile", choices=["constant", "wobble"], default="constant")
    s.add_argument("--wobble-period-s", type=float, default=10.0)
    s.add_argument("--dt-ms", type=int, default=50)

    t = sub.add_parser("track", parents=[common], help="relative rotations from the multi-resolution bank")
    t.add_argument("--events", required=True)
    t.add_argument("--intrinsics")
    t.add_argument("--method", choices=["ht", "cm"], default="ht")
    t.add_argument("--preset", choices=["suite", "default"], default="suite")
    t.add_argument("--resolutions-ms", default="400,200,100")
    t.add_argument("--dt-ms", type=int, default=50)

    a = sub.add_parser("average", parents=[common], help="anchored rotation averaging")
    a.add_argument("--edges", required=True)
    a.add_argument("--anchors", help="CSV t_us,r00..r22")
    a.add_argument("--anchor-weight", type=float, default=10.0)
    a.add_argument("--max-iters", type=int, default=500)
    a.add_argument("--tol", type=float, default=1e-6)
    a.add_argument("--dt-ms", type=int, default=50)
    a.add_argument("--no-chain", dest="chain", action="store_false", help="skip the dead-reckoning baseline")

    c = sub.add_parser("compensate", parents=[common], help="motion-compensated images before/after")
    c.add_argument("--events", required=True)
    c.add_argument("--intrinsics")
    c.add_argument("--window", required=True, help="ALPHA,BETA in microseconds")
    c.add_argument("--rotvec", help="rotation vector (rad); default: Hough estimate")
    c.add_argument("--preset", choices=["suite", "default"], default="suite")
    c.add_argument("--kernel-sigma", type=float, default=1.0)
    c.add_argument("--polarity", choices=["on", "off"], default="off")

    b = sub.add_parser("benchmark", parents=[common], help="HT vs CM wall time on the synthetic suite")
    b.add_argument("--durations-ms", default="100,200,400")
    b.add_argument("--methods", default="ht,cm")
    b.add_argument("--cases", type=int, default=2, help="suite instances per duration")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--preset", choices=["suite", "default"], default="suite")

    e = sub.add_parser("evaluate", parents=[common], help="errors against ground truth")
    e.add_argument("--groundtruth", required=True)
    e.add_argument("--edges")
    e.add_argument("--attitudes")

    r = sub.add_parser("rerun", help="replay a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", "-o", help="output directory (default: the manifest's own)")
    return p


def _run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "rerun":
        try:
            m = RunManifest.from_json(Path(args.manifest).read_text())
        except (OSError, ValueError, TypeError) as exc:
            print(f"error: cannot load manifest: {exc}", file=sys.stderr)
            return EXIT_USAGE
        new = list(m.argv)
        if args.out:
            new += ["--out", args.out]
        return _run(new)
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        kv = _load_config(args.config)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create {out}: {exc}") from None
        info = COMMANDS[args.command](args, out, kv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    # argv with absolute input paths and without --out, so the manifest replays anywhere
    replay, skip = [], False
    path_flags = {"--events", "--intrinsics", "--edges", "--anchors", "--groundtruth", "--attitudes", "--config"}
    for i, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        if tok in ("--out", "-o"):
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        if i > 0 and argv[i - 1] in path_flags:
            tok = _abspath(tok)
        replay.append(tok)
    inputs = {k: _abspath(getattr(args, k)) for k in ("events", "intrinsics", "edges", "anchors", "groundtruth",
                                                       "attitudes", "config") if getattr(args, k, None)}
    config = {k: v for k, v in vars(args).items() if k not in ("command", "out")}
    config.update(kv)
    config.update(info.get("config", {}))
    RunManifest(args.command, replay, config, inputs, info["outputs"], args.seed, version_string(),
                round(time.perf_counter() - t0, 3), info.get("volatile", [])).write(out)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    return _run(list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())
