"""Event records, text-stream ingestion, time-window chunking and 3D point sets.

Events are kept column-wise (numpy arrays) because every consumer iterates
over thousands of them; :class:`Event` is the scalar view of one row.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

HEADER_TAG = "# evstar v1"
CHUNK_SCALED_DURATION = 100.0  # scaled time units spanned by a chunk by default


class EventParseError(ValueError):
    def __init__(self, msg: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {msg}" if lineno is not None else msg)


class EmptyStreamError(ValueError):
    pass


class UnsortedTimestampsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Event:
    t: int
    x: float
    y: float
    polarity: int

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"negative timestamp {self.t}")
        if self.polarity not in (1, -1):
            raise ValueError(f"polarity must be +1 or -1, got {self.polarity}")


@dataclass
class EventStream:
    """Column-wise event storage: ``t`` in microseconds, ``x``/``y`` in pixels."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int = 240
    height: int = 180
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns must have equal length")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), float(self.x[i]), float(self.y[i]), int(self.p[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    @property
    def sensor(self) -> tuple[int, int]:
        return (self.width, self.height)

    @classmethod
    def from_events(cls, events, width=240, height=180) -> "EventStream":
        events = list(events)
        return cls(
            [e.t for e in events], [e.x for e in events], [e.y for e in events],
            [e.polarity for e in events], width, height,
        )

    def take(self, idx) -> "EventStream":
        return EventStream(self.t[idx], self.x[idx], self.y[idx], self.p[idx], self.width, self.height, dict(self.meta))

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.t) >= 0))

    def sorted(self) -> "EventStream":
        return self.take(np.argsort(self.t, kind="stable"))


@dataclass
class EventChunk:
    events: EventStream
    alpha: int
    beta: int

    def __post_init__(self):
        if not self.beta > self.alpha:
            raise ValueError(f"window must have positive duration, got [{self.alpha}, {self.beta}]")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def empty(self) -> bool:
        return len(self.events) == 0

    @property
    def window(self) -> tuple[int, int]:
        return (self.alpha, self.beta)

    @property
    def duration_us(self) -> int:
        return self.beta - self.alpha

    @property
    def sensor(self) -> tuple[int, int]:
        return self.events.sensor


@dataclass
class PointCloud:
    """Recentred spatio-temporal points ``[x, y, (t - alpha) * time_scale] - centroid``."""

    points: np.ndarray
    centroid: np.ndarray
    window: tuple[int, int]
    time_scale: float  # scaled units per microsecond

    def uncentre(self) -> np.ndarray:
        """Recover ``[x, y, t - alpha]`` (time in microseconds)."""
        z = self.points + self.centroid
        return np.column_stack([z[:, 0], z[:, 1], z[:, 2] / self.time_scale])


def default_time_scale(alpha: int, beta: int) -> float:
    return CHUNK_SCALED_DURATION / (beta - alpha)


def _parse_header(line: str) -> dict:
    if not line.startswith(HEADER_TAG):
        raise EventParseError(f"expected header starting with {HEADER_TAG!r}", 1)
    meta = {}
    for tok in line[len(HEADER_TAG):].split():
        if "=" not in tok:
            raise EventParseError(f"bad header token {tok!r}", 1)
        k, v = tok.split("=", 1)
        meta[k] = v
    for key in ("width", "height"):
        if key not in meta:
            raise EventParseError(f"header lacks {key}=", 1)
    if meta.get("time_unit", "us") != "us":
        raise EventParseError(f"unsupported time_unit {meta['time_unit']!r}", 1)
    return meta


def parse_event_stream(source) -> EventStream:
    """Parse the text event format from a path or an open text file.

    Data lines are ``t,x,y,p`` with ``p`` in {0, 1} (0 decodes to -1). Out-of-order
    timestamps are stably sorted with a warning.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as fh:
            text = fh.read()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise EmptyStreamError("event file is empty")
    meta = _parse_header(lines[0].strip())
    width, height = int(meta["width"]), int(meta["height"])
    ts, xs, ys, ps = [], [], [], []
    for lineno, line in enumerate(lines[1:], 2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventParseError(f"expected 4 fields, got {len(parts)}: {line!r}", lineno)
        try:
            t = int(parts[0])
            x = float(parts[1])
            y = float(parts[2])
            praw = int(parts[3])
        except ValueError as exc:
            raise EventParseError(f"{exc}: {line!r}", lineno) from None
        if t < 0:
            raise EventParseError(f"negative timestamp {t}", lineno)
        if praw not in (0, 1):
            raise EventParseError(f"polarity must be 0 or 1, got {praw}", lineno)
        if not (0 <= x < width and 0 <= y < height):
            raise EventParseError(f"pixel ({x}, {y}) outside {width}x{height} sensor", lineno)
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(1 if praw == 1 else -1)
    if not ts:
        raise EmptyStreamError("event file has no data lines")
    stream = EventStream(ts, xs, ys, ps, width, height, meta)
    if not stream.is_sorted():
        warnings.warn("event timestamps are not monotone; sorting", UnsortedTimestampsWarning, stacklevel=2)
        stream = stream.sorted()
    return stream


def format_event_stream(stream: EventStream, extra_meta: dict | None = None) -> str:
    meta = {"width": stream.width, "height": stream.height, "time_unit": "us"}
    meta.update(extra_meta or {})
    out = [HEADER_TAG + " " + " ".join(f"{k}={v}" for k, v in meta.items())]
    pbits = (stream.p > 0).astype(int)
    out.extend(f"{t},{x:.4f},{y:.4f},{p}" for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), pbits.tolist()))
    return "\n".join(out) + "\n"


def write_event_stream(path, stream: EventStream, extra_meta: dict | None = None) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_event_stream(stream, extra_meta))


def chunk_stream(events: EventStream, alpha: int, beta: int) -> EventChunk:
    """Events with ``alpha <= t <= beta`` (both ends inclusive)."""
    if alpha >= beta:
        raise ValueError(f"window start must precede end, got [{alpha}, {beta}]")
    lo = np.searchsorted(events.t, alpha, side="left")
    hi = np.searchsorted(events.t, beta, side="right")
    return EventChunk(events.take(slice(lo, hi)), int(alpha), int(beta))


def sliding_windows(t0: int, t1: int, length: int, stride: int) -> list[tuple[int, int]]:
    """All windows ``[s, s + length]`` with ``s = t0 + k * stride`` fitting inside ``[t0, t1]``."""
    out = []
    s = t0
    while s + length <= t1:
        out.append((s, s + length))
        s += stride
    return out


def to_points(chunk: EventChunk, time_scale: float | None = None) -> PointCloud:
    if chunk.empty:
        raise ValueError("cannot build a point set from an empty chunk")
    if time_scale is None:
        time_scale = default_time_scale(chunk.alpha, chunk.beta)
    ev = chunk.events
    z = np.column_stack([ev.x, ev.y, (ev.t - chunk.alpha).astype(np.float64) * time_scale])
    centroid = z.mean(axis=0)
    return PointCloud(z - centroid, centroid, chunk.window, float(time_scale))
