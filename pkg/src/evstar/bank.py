"""Bank of staggered Hough instances at several time resolutions.

Each resolution ``r`` runs two lanes of back-to-back windows, the second offset
by ``r / 2``. Events are dispatched to every lane whose current window contains
them; when a window closes its rotation is finalised and the lane restarts on
the next window. Finished windows become edges of the relative-rotation graph.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .events import EventStream
from .fileio import read_edges_csv, write_edges_csv
from .geom import CameraIntrinsics
from .hough import HoughAccumulator, HoughConfig, InsufficientCorrespondencesError, finalize_rotation


class DisconnectedGraphError(RuntimeError):
    def __init__(self, msg, gaps):
        super().__init__(msg)
        self.gaps = gaps


@dataclass
class BankConfig:
    resolutions_ms: tuple = (400, 200, 100)
    dt_ms: int = 50
    stride_fraction: float = 0.5
    hough: HoughConfig = field(default_factory=HoughConfig)
    # optional per-resolution overrides, keyed by resolution in ms
    per_resolution: dict = field(default_factory=dict)

    def __post_init__(self):
        self.resolutions_ms = tuple(int(r) for r in self.resolutions_ms)
        if self.dt_ms <= 0:
            raise ValueError("dt_ms must be positive")
        if self.stride_fraction != 0.5:
            raise ValueError("only a stride of half the resolution is supported")
        for r in self.resolutions_ms:
            if r <= 0 or r % self.dt_ms:
                raise ValueError(f"resolution {r} ms is not a positive multiple of dt = {self.dt_ms} ms")
            if (r // 2) % self.dt_ms or r % 2:
                raise ValueError(f"stride {r / 2} ms of resolution {r} ms is not a multiple of dt = {self.dt_ms} ms")

    @property
    def dt_us(self) -> int:
        return self.dt_ms * 1000

    def hough_for(self, resolution_ms: int) -> HoughConfig:
        return self.per_resolution.get(resolution_ms, self.hough)


@dataclass(frozen=True)
class Window:
    alpha: int
    beta: int
    resolution_ms: int
    lane: int


@dataclass
class Edge:
    alpha: int
    beta: int
    R: np.ndarray
    resolution_ms: int = 0
    n_correspondences: int = 0
    n_events: int = 0


def plan_instances(duration_us: int, config: BankConfig) -> list[Window]:
    """Every window of every lane fitting inside ``[0, duration_us]``, sorted by (beta, alpha)."""
    out = []
    for r in config.resolutions_ms:
        r_us = r * 1000
        if duration_us < r_us:
            warnings.warn(f"stream shorter than resolution {r} ms; skipped", stacklevel=2)
            continue
        for lane, offset in enumerate((0, r_us // 2)):
            a = offset
            while a + r_us <= duration_us:
                out.append(Window(a, a + r_us, r, lane))
                a += r_us
    out.sort(key=lambda w: (w.beta, w.alpha, -w.resolution_ms))
    return out


def windows_containing(t: int, plan: list[Window]) -> list[Window]:
    return [w for w in plan if w.alpha <= t <= w.beta]


class _Lane:
    def __init__(self, windows: list[Window]):
        self.windows = windows
        self.k = 0
        self.acc: HoughAccumulator | None = None
        self.boundary: list[np.ndarray] = []  # events to replay when the window opens
        self.pending: list[np.ndarray] = []  # events at the open window's end seen in earlier batches

    @property
    def current(self) -> Window | None:
        return self.windows[self.k] if self.k < len(self.windows) else None


class Bank:
    """Streaming dispatcher over the planned windows; at most one live accumulator per lane."""

    def __init__(self, config: BankConfig, intrinsics: CameraIntrinsics, duration_us: int, sensor=(240, 180)):
        self.config = config
        self.intrinsics = intrinsics
        self.sensor = tuple(sensor)
        self.plan = plan_instances(duration_us, config)
        by_lane: dict = {}
        for w in self.plan:
            by_lane.setdefault((w.resolution_ms, w.lane), []).append(w)
        self.lanes = [_Lane(sorted(ws, key=lambda w: w.alpha)) for _, ws in sorted(by_lane.items(), reverse=True)]
        self.edges: list[Edge] = []
        self.failures: list[tuple[Window, str]] = []
        self.n_dropped = 0
        self.max_live = 0
        self._last_t = -1

    def _open(self, lane: _Lane):
        w = lane.current
        lane.acc = HoughAccumulator(self.config.hough_for(w.resolution_ms), self.intrinsics, w.alpha, w.beta, self.sensor)

    def _close(self, lane: _Lane):
        w = lane.current
        try:
            rr = finalize_rotation(lane.acc)
            self.edges.append(Edge(w.alpha, w.beta, rr.R, w.resolution_ms, rr.n_correspondences,
                                   rr.diagnostics.get("n_events", 0)))
        except InsufficientCorrespondencesError as exc:
            self.failures.append((w, str(exc)))
        lane.acc = None
        lane.k += 1

    def _live(self) -> int:
        return sum(lane.acc is not None for lane in self.lanes)

    def _ensure_open(self, lane: _Lane):
        if lane.acc is None:
            self._open(lane)
            self.max_live = max(self.max_live, self._live())
            if lane.boundary:
                lane.acc.process_arrays(*np.concatenate(lane.boundary, axis=1))
                lane.boundary = []

    def feed(self, t, x, y) -> None:
        """Dispatch a time-ordered batch of events (may be called repeatedly).

        Windows are closed (both ends inclusive), so an event at a lane's window
        boundary goes to the closing and the opening window. A window is only
        finalised once an event past its end arrives (or at :meth:`finish`).
        """
        t = np.asarray(t, dtype=np.int64)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(t) == 0:
            return
        if t[0] < self._last_t or np.any(np.diff(t) < 0):
            raise ValueError("events must arrive in timestamp order")
        self._last_t = int(t[-1])
        covered = np.zeros(len(t), bool)
        for lane in self.lanes:
            lo = 0
            while lane.current is not None:
                w = lane.current
                start = max(int(np.searchsorted(t, w.alpha, side="left")), lo)
                stop = int(np.searchsorted(t, w.beta, side="right"))
                if start >= len(t):
                    break
                self._ensure_open(lane)
                if stop > start:
                    lane.acc.process_arrays(t[start:stop], x[start:stop], y[start:stop])
                    covered[start:stop] = True
                at_end = max(int(np.searchsorted(t, w.beta, side="left")), start)
                if stop == len(t):
                    # more events at t == beta may follow in a later batch
                    if stop > at_end:
                        lane.pending.append(np.vstack([t[at_end:stop], x[at_end:stop], y[at_end:stop]]))
                    break
                # events at beta from earlier batches are replayed into the next window;
                # this batch's are picked up by the next window's own slice
                lane.boundary, lane.pending = lane.pending, []
                self._close(lane)
                lo = at_end
        self.n_dropped += int(np.count_nonzero(~covered))

    def finish(self) -> "EdgeSet":
        """Close every remaining window (those cut short by the end of the stream fail) and return the edges."""
        for lane in self.lanes:
            while lane.current is not None:
                self._ensure_open(lane)
                lane.boundary, lane.pending = lane.pending, []
                self._close(lane)
        return EdgeSet(sorted(self.edges, key=lambda e: (e.alpha, e.beta)), self.config.dt_us)


def run_bank(stream: EventStream, intrinsics: CameraIntrinsics, config: BankConfig | None = None,
             duration_us: int | None = None, batch_events: int = 50_000) -> tuple["EdgeSet", Bank]:
    """Replay a stream through a bank, in batches of ``batch_events``."""
    config = config or BankConfig()
    if duration_us is None:
        duration_us = int(stream.t[-1]) if len(stream) else 0
    bank = Bank(config, intrinsics, duration_us, stream.sensor)
    for s in range(0, len(stream), batch_events):
        sl = slice(s, s + batch_events)
        bank.feed(stream.t[sl], stream.x[sl], stream.y[sl])
    return bank.finish(), bank


@dataclass
class EdgeSet:
    edges: list
    dt_us: int = 50_000

    def __len__(self) -> int:
        return len(self.edges)

    def __iter__(self):
        return iter(self.edges)

    def nodes(self) -> np.ndarray:
        """Sorted times referenced by at least one edge."""
        return np.unique([t for e in self.edges for t in (e.alpha, e.beta)]).astype(np.int64)

    def gaps(self) -> list[tuple[int, int]]:
        """Open time intervals inside the covered span that no window covers.

        Closed windows that overlap or touch chain together. Node-level
        connectivity is checked by the averaging graph, where anchors can join
        components that share no edge (with the default plan, the odd
        multiples of 50 ms are reached only by the second 100 ms lane).
        """
        if not self.edges:
            return []
        iv = sorted((int(e.alpha), int(e.beta)) for e in self.edges)
        out, reach = [], iv[0][1]
        for a, b in iv[1:]:
            if a > reach:
                out.append((reach, a))
            reach = max(reach, b)
        return out

    def is_connected(self) -> bool:
        return len(self.edges) > 0 and not self.gaps()

    def check_connected(self) -> None:
        if not self.edges:
            raise DisconnectedGraphError("no edges", [])
        g = self.gaps()
        if g:
            desc = ", ".join(f"[{a}, {b}] us" for a, b in g)
            raise DisconnectedGraphError(f"relative-rotation graph is disconnected; uncovered gaps: {desc}", g)

    def on_grid(self) -> bool:
        return all(e.alpha % self.dt_us == 0 and e.beta % self.dt_us == 0 for e in self.edges)

    def to_csv(self, path) -> None:
        write_edges_csv(path, self.edges)

    @classmethod
    def from_csv(cls, path, dt_us: int = 50_000) -> "EdgeSet":
        return cls([Edge(a, b, R) for a, b, R in read_edges_csv(path)], dt_us)


def collect_edges(edges, dt_us: int = 50_000, check: bool = True) -> EdgeSet:
    """EdgeSet from finalised windows; raises if the graph is disconnected."""
    es = EdgeSet(sorted(edges, key=lambda e: (e.alpha, e.beta)), dt_us)
    if check:
        es.check_connected()
    return es
