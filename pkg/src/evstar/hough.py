"""Event-triggered 3D line Hough transform for relative rotation estimation.

Each event is a point ``[x, y, t]`` in a recentred, time-scaled space. For every
direction of a hemispherical icosphere grid the point is projected onto the
plane orthogonal to that direction (Roberts' parametrisation) and votes for the
containing ``(u, v)`` bin. Every cell keeps an incrementally updated line fit;
once a cell holds ``delta`` votes its line yields a star correspondence between
the window ends, and the correspondence matrix ``C`` is kept current by
add/subtract of outer products. The rotation is read off ``C`` by SVD.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np
from scipy.spatial import ConvexHull

from . import _kernels as K
from .events import Event, EventChunk, default_time_scale, to_points
from .geom import CameraIntrinsics, backproject, exp_so3

# Fixed tilt applied to the icosphere so that no grid vertex lies on the
# image plane (t = 0): every antipodal pair then has a unique t > 0 member.
_GRID_TILT = exp_so3(np.deg2rad(0.5) * np.array([0.6, 0.8, 0.0]))


class InsufficientCorrespondencesError(RuntimeError):
    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


class DegenerateLineError(ValueError):
    pass


# -- direction grid -----------------------------------------------------------------


def _icosahedron():
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    v = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            v += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    v = np.array(v)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    faces = ConvexHull(v).simplices
    return v, faces


def icosphere(level: int) -> np.ndarray:
    """Vertices of an icosahedron subdivided ``level`` times, on the unit sphere."""
    verts, faces = _icosahedron()
    verts = list(map(tuple, verts))
    for _ in range(level):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.add(verts[i], verts[j])
                verts.append(tuple(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts)


def _canonical_sign(d) -> float:
    # positive time component; ties by first, then second component
    for c in (d[2], d[0], d[1]):
        if c > 0:
            return 1.0
        if c < 0:
            return -1.0
    return 1.0


@dataclass(frozen=True)
class DirectionGrid:
    directions: np.ndarray
    subdivision_level: int

    def __len__(self) -> int:
        return len(self.directions)


@lru_cache(maxsize=8)
def build_direction_grid(subdivision_level: int = 4) -> DirectionGrid:
    """Hemisphere of line directions: icosphere vertices modulo antipodes, t > 0."""
    if subdivision_level < 0:
        raise ValueError("subdivision level must be non-negative")
    verts = icosphere(subdivision_level) @ _GRID_TILT.T
    keep = [v for v in verts if _canonical_sign(v) > 0]
    dirs = np.array(keep)
    dirs.setflags(write=False)
    return DirectionGrid(dirs, subdivision_level)


def roberts_coefficients(dirs) -> np.ndarray:
    """Rows ``[a11, a12, a13, a21, a22, a23]`` with ``u = a1 . z`` and ``v = a2 . z``."""
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    d1, d2, d3 = d[:, 0], d[:, 1], d[:, 2]
    k = 1.0 / (1.0 + d3)
    return np.column_stack(
        [1.0 - d1 * d1 * k, -d1 * d2 * k, -d1, -d1 * d2 * k, 1.0 - d2 * d2 * k, -d2]
    )


def roberts_project(z, d) -> tuple[float, float]:
    """Coordinates of ``z`` projected along unit direction ``d`` onto its orthogonal plane."""
    a = roberts_coefficients(d)[0]
    z = np.asarray(z, dtype=float)
    return float(a[:3] @ z), float(a[3:] @ z)


# -- configuration ------------------------------------------------------------------


@dataclass
class HoughConfig:
    subdivision_level: int = 4
    delta: int = 5
    bin_size: float = 2.0
    # scaled units per millisecond; None maps every window onto 100 scaled units
    time_scale_ms: float | None = None
    eps_dir: float = 1e-6
    # half-width of the (u, v) grid in scaled units; None derives it from sensor + window
    plane_half_extent: float | None = None

    def __post_init__(self):
        if self.delta < 1:
            raise ValueError("delta must be at least 1")
        if self.bin_size <= 0:
            raise ValueError("bin_size must be positive")

    def time_scale(self, alpha: int, beta: int) -> float:
        """Scaled units per microsecond."""
        if self.time_scale_ms is None:
            return default_time_scale(alpha, beta)
        return self.time_scale_ms / 1000.0

    @classmethod
    def from_dict(cls, kv: dict) -> "HoughConfig":
        names = {f.name: f for f in fields(cls)}
        out = {}
        for k, v in kv.items():
            if k not in names:
                continue
            if k in ("subdivision_level", "delta"):
                out[k] = int(v)
            elif v in (None, "", "auto", "None"):
                out[k] = None
            else:
                out[k] = float(v)
        return cls(**out)


@dataclass(frozen=True)
class PlaneGrid:
    u_min: float
    u_max: float
    v_min: float
    v_max: float
    bin_size: float

    @property
    def n_u(self) -> int:
        return math.ceil((self.u_max - self.u_min) / self.bin_size)

    @property
    def n_v(self) -> int:
        return math.ceil((self.v_max - self.v_min) / self.bin_size)

    @classmethod
    def covering(cls, half_extent: float, bin_size: float) -> "PlaneGrid":
        return cls(-half_extent, half_extent, -half_extent, half_extent, bin_size)

    def cell_of(self, u: float, v: float):
        iu = math.floor((u - self.u_min) / self.bin_size)
        iv = math.floor((v - self.v_min) / self.bin_size)
        if 0 <= iu < self.n_u and 0 <= iv < self.n_v:
            return iu, iv
        return None


# -- single-cell reference operations --------------------------------------------------


@dataclass
class HoughCell:
    votes: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    P: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    Sigma: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    last_contribution: np.ndarray | None = None

    @property
    def direction(self) -> np.ndarray:
        return self.P[:, 0]


def update_pca(cell: HoughCell, z) -> HoughCell:
    """Incremental mean / left-singular-basis update of one cell (numpy reference).

    ``cell.votes`` must already count ``z``. Mirrors the compiled kernel but uses
    LAPACK QR and SVD so the two can be checked against each other.
    """
    z = np.asarray(z, dtype=float)
    n = cell.votes
    if n < 1:
        raise ValueError("votes must include the new point")
    if n == 1:
        return HoughCell(1, z.copy(), np.eye(3), np.zeros((3, 3)), cell.last_contribution)
    P, Sigma, m_old = cell.P, cell.Sigma, cell.mean
    mean = (n - 1) / n * m_old + z / n
    B_hat = np.zeros((3, 2))
    B_hat[:, 1] = math.sqrt((n - 1) / n) * (z - m_old)
    ptb = P.T @ B_hat
    resid = B_hat - P @ ptb
    Q, Rq = np.linalg.qr(resid)
    tol = 1e-9 * np.linalg.norm(B_hat)
    B_tilde = np.where(np.abs(np.diag(Rq)) > tol, Q, 0.0)
    E = np.zeros((5, 5))
    E[:3, :3] = Sigma
    E[:3, 3:] = ptb
    E[3:, 3:] = B_tilde.T @ resid
    Pt, s, _ = np.linalg.svd(E)
    newP = (np.hstack([P, B_tilde]) @ Pt)[:, :3]
    newP = _repair_basis(newP)
    return HoughCell(n, mean, newP, np.diag(s[:3]), cell.last_contribution)


def _repair_basis(P: np.ndarray) -> np.ndarray:
    P = np.ascontiguousarray(P, dtype=float).copy()
    K._orthonormalize3(P)
    return P


def batch_line_fit(points) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal least-squares line: sample mean and top left singular vector."""
    Z = np.asarray(points, dtype=float).T
    mean = Z.mean(axis=1)
    U, _, _ = np.linalg.svd(Z - mean[:, None])
    return mean, U[:, 0]


def cell_line_endpoints(cell: HoughCell, alpha: int, beta: int, centroid, time_scale: float, eps_dir: float = 1e-6):
    """Pixel positions of the cell's line at the window ends ``alpha`` and ``beta``."""
    d = cell.direction
    if abs(d[2]) <= eps_dir:
        raise DegenerateLineError(f"line direction has time component {d[2]:.3g}")
    centroid = np.asarray(centroid, dtype=float)
    m = cell.mean
    ends = []
    for tau in (-centroid[2], (beta - alpha) * time_scale - centroid[2]):
        lam = (tau - m[2]) / d[2]
        ends.append(m[:2] + lam * d[:2] + centroid[:2])
    return ends[0], ends[1]


# -- accumulator ------------------------------------------------------------------------


@dataclass
class RelativeRotation:
    R: np.ndarray
    window: tuple[int, int]
    n_correspondences: int
    diagnostics: dict = field(default_factory=dict)


def rotation_from_correspondence_matrix(C: np.ndarray) -> np.ndarray:
    """Least-squares rotation ``R`` with ``s_alpha ~ R s_beta`` from ``C = sum s_alpha s_beta^T``."""
    U, _, Vt = np.linalg.svd(C)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def correspondence_rank(C: np.ndarray, rtol: float = 1e-5) -> int:
    """Numerical rank relative to the largest singular value.

    One noisy star gives ratios near 1e-6 while three nearly collinear stars
    10 px apart already reach 5e-4, hence the default.
    """
    s = np.linalg.svd(C, compute_uv=False)
    if s[0] <= 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


class HoughAccumulator:
    """Streaming Hough state for one window ``[alpha, beta]``.

    ``centroid`` is the offset subtracted from raw ``[x, y, scaled t]`` points.
    Batch use passes the exact chunk centroid; streaming use (where the chunk
    is not known in advance) defaults to the centre of the sensor x window box.
    ``directions`` optionally restricts voting to a contiguous slice of the
    direction grid, which is how the per-direction parallel lanes are built.
    """

    def __init__(
        self,
        config: HoughConfig,
        intrinsics: CameraIntrinsics,
        alpha: int,
        beta: int,
        sensor: tuple[int, int] = (240, 180),
        centroid=None,
        directions: slice | None = None,
        capacity: int = 1 << 14,
    ):
        if beta <= alpha:
            raise ValueError("window must have positive duration")
        self.config = config
        self.intrinsics = intrinsics
        self.alpha, self.beta = int(alpha), int(beta)
        self.sensor = tuple(sensor)
        self.time_scale = config.time_scale(self.alpha, self.beta)
        span = (self.beta - self.alpha) * self.time_scale
        if centroid is None:
            centroid = (sensor[0] / 2.0, sensor[1] / 2.0, span / 2.0)
        self.centroid = np.asarray(centroid, dtype=float)
        self.grid = build_direction_grid(config.subdivision_level)
        sl = directions or slice(0, len(self.grid))
        self.dir_lo, self.dir_hi, _ = sl.indices(len(self.grid))
        half = config.plane_half_extent
        if half is None:
            half = float(np.linalg.norm([sensor[0], sensor[1], span]))
        self.plane = PlaneGrid.covering(half, config.bin_size)
        self._rob = np.ascontiguousarray(roberts_coefficients(self.grid.directions))
        self._intr = np.array([intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy])
        self._tau_a = -self.centroid[2]
        self._tau_b = span - self.centroid[2]
        self.counters = np.zeros(K.N_COUNTERS, dtype=np.int64)
        self.C = np.zeros((3, 3))
        n_dirs = self.dir_hi - self.dir_lo
        self._grow(max(capacity, 2 * n_dirs), max(capacity // 4, 2 * n_dirs), max(capacity // 64, 2 * n_dirs))

    def _grow(self, rows: int, ext: int, contrib: int):
        """(Re)allocate the cell tables so they hold at least the given counts."""
        size = 1 << int(np.ceil(np.log2(max(2 * rows, 16))))
        old = getattr(self, "_A", None)
        if old is None or size > len(old):
            A = np.full((size, K.A_WIDTH), K.EMPTY)
            if old is not None:
                K.rehash(old, A)
            self._A = A
        for name, n_rows, width, used in (
            ("_B", ext, K.B_WIDTH, K.N_EXT), ("_Ct", contrib, 9, K.N_CONTRIB),
        ):
            cur = getattr(self, name, None)
            if cur is None or n_rows > len(cur):
                buf = np.zeros((n_rows, width))
                if cur is not None:
                    m = int(self.counters[used])
                    buf[:m] = cur[:m]
                setattr(self, name, buf)
        self._rows_cache = None

    # -- streaming interface --

    def recentre(self, t, x, y) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        z = np.column_stack(
            [np.asarray(x, dtype=float), np.asarray(y, dtype=float), (t - self.alpha).astype(float) * self.time_scale]
        )
        return z - self.centroid

    def process_event(self, e: Event) -> None:
        if not self.alpha <= e.t <= self.beta:
            raise ValueError(f"event at t={e.t} outside window [{self.alpha}, {self.beta}]")
        self.process_points(self.recentre([e.t], [e.x], [e.y]))

    def process_arrays(self, t, x, y) -> None:
        t = np.asarray(t)
        if len(t) and (t.min() < self.alpha or t.max() > self.beta):
            raise ValueError("events outside the accumulator window")
        self.process_points(self.recentre(t, x, y))

    def process_points(self, zs: np.ndarray) -> None:
        """Vote already recentred points, in order."""
        zs = np.ascontiguousarray(zs, dtype=float)
        i, n = 0, len(zs)
        n_dirs = self.dir_hi - self.dir_lo
        while i < n:
            i = K.process_events(
                zs, i, n, self.dir_lo, self.dir_hi, self._rob, self._A, self._B, self._Ct,
                self.C, self.counters, self.centroid,
                self._tau_a, self._tau_b, self._intr, self.config.delta, self.config.eps_dir,
                self.plane.u_min, self.plane.v_min, self.plane.bin_size, self.plane.n_u, self.plane.n_v,
            )
            if i < n:
                c = self.counters
                need = [int(c[k]) + n_dirs for k in (K.N_CELLS, K.N_EXT, K.N_CONTRIB)]
                have = [len(self._A) // 2, len(self._B), len(self._Ct)]
                self._grow(*[2 * h if nd > h else h for nd, h in zip(need, have)])
        self._rows_cache = None

    # -- inspection --

    @property
    def n_cells(self) -> int:
        return int(self.counters[K.N_CELLS])

    @property
    def n_events(self) -> int:
        return int(self.counters[K.N_EVENTS])

    @property
    def n_cells_over_delta(self) -> int:
        return int(np.count_nonzero(self._B[: int(self.counters[K.N_EXT]), K.B_HAS]))

    def _rows(self) -> np.ndarray:
        """Occupied hash rows in cell creation order."""
        if self._rows_cache is None:
            occ = np.nonzero(self._A[:, K.A_KEY] != K.EMPTY)[0]
            self._rows_cache = occ[np.argsort(self._A[occ, K.A_ORDER], kind="stable")]
        return self._rows_cache

    def cell_arrays(self, min_votes: int = 0) -> dict:
        """Dense copies of the live cell state, one row per cell in creation order.

        One-vote cells report P = I and zero singular values; ``contribution``
        rows are zero where ``has_contribution`` is False. ``min_votes`` keeps
        only cells with at least that many votes (cheap; skips the full sort).
        """
        if min_votes > 0:
            occ = np.nonzero((self._A[:, K.A_KEY] != K.EMPTY) & (self._A[:, K.A_VOTES] >= min_votes))[0]
            rows = occ[np.argsort(self._A[occ, K.A_ORDER], kind="stable")]
        else:
            rows = self._rows()
        A = self._A[rows]
        n = len(A)
        ext = A[:, K.A_EXT].astype(np.int64)
        e = ext >= 0
        B = self._B[ext[e]]
        P = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        P[e] = B[:, K.B_P:K.B_P + 9].reshape(-1, 3, 3)
        sig = np.zeros((n, 3))
        sig[e] = B[:, K.B_SIG:K.B_SIG + 3]
        has = np.zeros(n, bool)
        has[e] = B[:, K.B_HAS] != 0
        contrib = np.zeros((n, 3, 3))
        ce = np.nonzero(e)[0][B[:, K.B_HAS] != 0]
        contrib[ce] = self._Ct[B[B[:, K.B_HAS] != 0, K.B_CIDX].astype(np.int64)].reshape(-1, 3, 3)
        key = A[:, K.A_KEY].astype(np.int64)
        return {
            "votes": A[:, K.A_VOTES].astype(np.int64), "mean": A[:, K.A_MEAN:K.A_MEAN + 3].copy(),
            "P": P, "sigma": sig, "contribution": contrib, "has_contribution": has,
            "direction": key // (self.plane.n_u * self.plane.n_v), "key": key,
        }

    def cell(self, index: int) -> HoughCell:
        """Cell number ``index`` in creation order."""
        row = self._A[self._rows()[index]]
        votes, mean, e = int(row[K.A_VOTES]), row[K.A_MEAN:K.A_MEAN + 3].copy(), int(row[K.A_EXT])
        if e < 0:
            return HoughCell(votes, mean, np.eye(3), np.zeros((3, 3)), None)
        b = self._B[e]
        contrib = self._Ct[int(b[K.B_CIDX])].reshape(3, 3).copy() if b[K.B_HAS] else None
        return HoughCell(votes, mean, b[K.B_P:K.B_P + 9].reshape(3, 3).copy(), np.diag(b[K.B_SIG:K.B_SIG + 3]), contrib)

    def diagnostics(self) -> dict:
        c = self.counters
        return {
            "n_events": int(c[K.N_EVENTS]),
            "n_cells": int(c[K.N_CELLS]),
            "n_cells_over_delta": self.n_cells_over_delta,
            "n_out_of_grid": int(c[K.N_OUT_OF_GRID]),
            "n_degenerate": int(c[K.N_DEGENERATE]),
            "n_visits": int(c[K.N_VISITS]),
            "n_qr": int(c[K.N_QR]),
            "n_svd": int(c[K.N_SVD]),
            "max_jacobi_sweeps": int(c[K.MAX_SWEEPS]),
        }

    def finalize(self) -> RelativeRotation:
        return finalize_rotation(self)


def finalize_rotation(acc: HoughAccumulator) -> RelativeRotation:
    diag = acc.diagnostics()
    if correspondence_rank(acc.C) < 2:
        raise InsufficientCorrespondencesError(
            f"correspondence matrix has rank < 2 over window [{acc.alpha}, {acc.beta}] "
            f"({diag['n_cells_over_delta']} cells over threshold, {diag['n_events']} events)",
            diag,
        )
    R = rotation_from_correspondence_matrix(acc.C)
    return RelativeRotation(R, (acc.alpha, acc.beta), diag["n_cells_over_delta"], diag)


def run_chunk(chunk: EventChunk, intrinsics: CameraIntrinsics, config: HoughConfig | None = None) -> RelativeRotation:
    """Relative rotation over one chunk: recentre, vote every event in time order, solve."""
    config = config or HoughConfig()
    if chunk.empty:
        raise InsufficientCorrespondencesError("empty chunk", {"n_events": 0})
    cloud = to_points(chunk, config.time_scale(chunk.alpha, chunk.beta))
    acc = HoughAccumulator(config, intrinsics, chunk.alpha, chunk.beta, chunk.sensor, centroid=cloud.centroid)
    acc.process_points(cloud.points)
    return finalize_rotation(acc)


def lane_slices(n_dirs: int, n_lanes: int) -> list[slice]:
    edges = np.linspace(0, n_dirs, n_lanes + 1).round().astype(int)
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def run_chunk_parallel(
    chunk: EventChunk, intrinsics: CameraIntrinsics, config: HoughConfig | None = None, n_lanes: int = 4
) -> tuple[RelativeRotation, np.ndarray]:
    """Direction-parallel variant: each lane owns a slice of directions and a partial C.

    Lanes touch disjoint cells, so they run concurrently on threads (the kernel
    releases the GIL); the partial matrices are summed at the end. Returns the
    rotation and the merged C.
    """
    config = config or HoughConfig()
    if chunk.empty:
        raise InsufficientCorrespondencesError("empty chunk", {"n_events": 0})
    cloud = to_points(chunk, config.time_scale(chunk.alpha, chunk.beta))
    n_dirs = len(build_direction_grid(config.subdivision_level))
    lanes = [
        HoughAccumulator(config, intrinsics, chunk.alpha, chunk.beta, chunk.sensor, centroid=cloud.centroid, directions=sl)
        for sl in lane_slices(n_dirs, n_lanes)
    ]
    with ThreadPoolExecutor(max_workers=len(lanes)) as pool:
        list(pool.map(lambda a: a.process_points(cloud.points), lanes))
    C = np.zeros((3, 3))
    for a in lanes:
        C += a.C
    n_over = sum(a.n_cells_over_delta for a in lanes)
    if correspondence_rank(C) < 2:
        raise InsufficientCorrespondencesError("correspondence matrix has rank < 2", {"n_cells_over_delta": n_over})
    diag = {"n_events": len(chunk), "n_cells_over_delta": n_over, "n_lanes": len(lanes)}
    return RelativeRotation(rotation_from_correspondence_matrix(C), chunk.window, n_over, diag), C


def endpoint_rays(cell: HoughCell, acc: HoughAccumulator):
    """Unit rays of a cell's end points in the accumulator's window (numpy path)."""
    sa, sb = cell_line_endpoints(cell, acc.alpha, acc.beta, acc.centroid, acc.time_scale, acc.config.eps_dir)
    return backproject(sa, acc.intrinsics), backproject(sb, acc.intrinsics)
