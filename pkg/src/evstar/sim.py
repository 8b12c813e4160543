"""Synthetic star-field event streams with exact ground-truth attitudes.

Convention: the attitude ``R(t)`` maps inertial directions into the camera
frame, ``ray_cam = R(t) @ star``. The relative rotation of a window is then
``R(alpha) @ R(beta).T`` and satisfies ``ray(alpha) = R_rel @ ray(beta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import EventStream
from .geom import CameraIntrinsics, exp_so3

DEFAULT_SENSOR = (240, 180)
DEFAULT_INTRINSICS = CameraIntrinsics(fx=320.0, fy=320.0, cx=120.0, cy=90.0)
_EDGE_MARGIN = 1e-3  # keep formatted pixel coordinates strictly inside the sensor


@dataclass
class StarScene:
    stars: np.ndarray  # (N, 3) unit inertial directions
    brightness: np.ndarray
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    sensor: tuple[int, int] = DEFAULT_SENSOR

    def __post_init__(self):
        self.stars = np.atleast_2d(np.asarray(self.stars, dtype=float))
        self.brightness = np.asarray(self.brightness, dtype=float)
        if not np.allclose(np.linalg.norm(self.stars, axis=1), 1.0, atol=1e-12):
            raise ValueError("star directions must be unit vectors")
        if np.any(self.brightness <= 0):
            raise ValueError("brightness must be positive")


def _rodrigues_batch(w: np.ndarray) -> np.ndarray:
    """Rotation matrices for an (N, 3) array of rotation vectors."""
    theta = np.linalg.norm(w, axis=1)
    safe = np.where(theta > 0, theta, 1.0)
    a = w / safe[:, None]
    Kx = np.zeros((len(w), 3, 3))
    Kx[:, 0, 1], Kx[:, 0, 2] = -a[:, 2], a[:, 1]
    Kx[:, 1, 0], Kx[:, 1, 2] = a[:, 2], -a[:, 0]
    Kx[:, 2, 0], Kx[:, 2, 1] = -a[:, 1], a[:, 0]
    s = np.sin(theta)[:, None, None]
    c = (1.0 - np.cos(theta))[:, None, None]
    return np.eye(3)[None] + s * Kx + c * (Kx @ Kx)


@dataclass
class MotionProfile:
    """Piecewise-constant angular velocity: ``segments`` of (duration_us, omega rad/s)."""

    segments: list = field(default_factory=list)

    def __post_init__(self):
        segs = []
        for dur, w in self.segments:
            if dur <= 0:
                raise ValueError("segment durations must be positive")
            segs.append((int(dur), np.asarray(w, dtype=float)))
        if not segs:
            raise ValueError("motion profile needs at least one segment")
        self.segments = segs
        starts = [0]
        R0 = [np.eye(3)]
        for dur, w in segs[:-1]:
            R0.append(exp_so3(w * dur * 1e-6) @ R0[-1])
            starts.append(starts[-1] + dur)
        self._starts = np.array(starts, dtype=np.int64)
        self._R0 = np.array(R0)
        self._w = np.array([w for _, w in segs])

    @classmethod
    def constant(cls, omega, duration_us: int) -> "MotionProfile":
        return cls([(duration_us, omega)])

    @classmethod
    def wobble(cls, omega, duration_us: int, period_us: int) -> "MotionProfile":
        """Angular velocity flipping sign every half period (the view oscillates)."""
        half = period_us // 2
        segs, t, sign = [], 0, 1.0
        while t < duration_us:
            d = min(half, duration_us - t)
            segs.append((d, sign * np.asarray(omega, dtype=float)))
            t += d
            sign = -sign
        return cls(segs)

    def attitudes(self, t) -> np.ndarray:
        """Attitude matrices at times ``t`` (microseconds); the last segment extends forever."""
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        k = np.searchsorted(self._starts, t, side="right") - 1
        k = np.clip(k, 0, len(self._starts) - 1)
        tau = (t - self._starts[k]).astype(float) * 1e-6
        return _rodrigues_batch(self._w[k] * tau[:, None]) @ self._R0[k]

    def attitude(self, t: int) -> np.ndarray:
        return self.attitudes([t])[0]


@dataclass
class GroundTruth:
    profile: MotionProfile
    duration_us: int
    dt_us: int = 50_000

    @property
    def grid(self) -> np.ndarray:
        return np.arange(0, self.duration_us + 1, self.dt_us, dtype=np.int64)

    def attitude(self, t: int) -> np.ndarray:
        return self.profile.attitude(t)

    def relative(self, alpha: int, beta: int) -> np.ndarray:
        Ra, Rb = self.profile.attitudes([alpha, beta])
        return Ra @ Rb.T

    def samples(self) -> dict:
        g = self.grid
        return dict(zip(g.tolist(), self.profile.attitudes(g)))


@dataclass
class SimulatedStream:
    events: EventStream
    truth: GroundTruth
    is_outlier: np.ndarray
    star_id: np.ndarray  # -1 for outliers


def generate_scene(
    n_stars: int,
    fov_deg: float = 30.0,
    brightness_range=(1.0, 1.0),
    seed: int = 0,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    sensor=DEFAULT_SENSOR,
    min_separation_px: float = 0.0,
) -> StarScene:
    """Stars uniform on the cap of half-angle ``fov_deg / 2`` about the optical axis.

    Samples whose projection falls outside the sensor, or closer than
    ``min_separation_px`` to an already accepted star, are redrawn, so every
    star is visible (and resolvable) at t = 0.
    """
    if n_stars < 1:
        raise ValueError("need at least one star")
    if not 0 < fov_deg <= 90:
        raise ValueError("fov_deg must lie in (0, 90]")
    rng = np.random.default_rng(seed)
    cos_h = np.cos(np.deg2rad(fov_deg) / 2.0)
    stars, pix = [], []
    attempts = 0
    while len(stars) < n_stars:
        attempts += 1
        if attempts > 10_000 * n_stars:
            raise RuntimeError("could not place the stars inside the sensor; reduce fov_deg or the separation")
        cz = rng.uniform(cos_h, 1.0)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        sz = np.sqrt(max(0.0, 1.0 - cz * cz))
        s = np.array([sz * np.cos(phi), sz * np.sin(phi), cz])
        x = intrinsics.fx * s[0] / s[2] + intrinsics.cx
        y = intrinsics.fy * s[1] / s[2] + intrinsics.cy
        if not (0 <= x < sensor[0] - _EDGE_MARGIN and 0 <= y < sensor[1] - _EDGE_MARGIN):
            continue
        if min_separation_px > 0 and pix and np.min(np.hypot(*(np.array(pix) - (x, y)).T)) < min_separation_px:
            continue
        stars.append(s)
        pix.append((x, y))
    lo, hi = brightness_range
    brightness = rng.uniform(lo, hi, size=n_stars) if hi > lo else np.full(n_stars, float(lo))
    return StarScene(np.array(stars), brightness, intrinsics, tuple(sensor))


def generate_events(
    scene: StarScene,
    profile: MotionProfile,
    duration_us: int,
    event_rate_per_star_hz: float = 200.0,
    pixel_noise_sigma: float = 0.5,
    outlier_ratio: float = 0.0,
    seed: int = 0,
    dt_us: int = 50_000,
) -> SimulatedStream:
    """Poisson event stream from every visible star, plus uniform spurious events.

    Star events sit at the projected star centre plus isotropic Gaussian pixel
    noise; polarity alternates per star. ``outlier_ratio`` is the expected
    fraction of all events that are spurious.
    """
    if event_rate_per_star_hz <= 0:
        raise ValueError("event rate must be positive")
    if not 0 <= outlier_ratio < 1:
        raise ValueError("outlier_ratio must lie in [0, 1)")
    if duration_us <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    intr, (w, h) = scene.intrinsics, scene.sensor
    T = duration_us * 1e-6
    ts, xs, ys, ps, ids = [], [], [], [], []
    for k, star in enumerate(scene.stars):
        n = rng.poisson(event_rate_per_star_hz * scene.brightness[k] * T)
        t = np.sort(rng.integers(0, duration_us + 1, size=n))
        noise = rng.normal(0.0, pixel_noise_sigma, size=(n, 2))
        if n == 0:
            continue
        rays = profile.attitudes(t) @ star
        front = rays[:, 2] > 0
        depth = np.where(front, rays[:, 2], 1.0)
        x = intr.fx * rays[:, 0] / depth + intr.cx + noise[:, 0]
        y = intr.fy * rays[:, 1] / depth + intr.cy + noise[:, 1]
        keep = front & (x >= 0) & (x < w - _EDGE_MARGIN) & (y >= 0) & (y < h - _EDGE_MARGIN)
        t, x, y = t[keep], x[keep], y[keep]
        p = np.where(np.arange(len(t)) % 2 == 0, 1, -1)
        ts.append(t), xs.append(x), ys.append(y), ps.append(p), ids.append(np.full(len(t), k))
    n_signal = int(sum(len(t) for t in ts))
    n_out = rng.poisson(n_signal * outlier_ratio / (1.0 - outlier_ratio)) if outlier_ratio > 0 else 0
    ts.append(rng.integers(0, duration_us + 1, size=n_out))
    xs.append(rng.uniform(0, w - _EDGE_MARGIN, size=n_out))
    ys.append(rng.uniform(0, h - _EDGE_MARGIN, size=n_out))
    ps.append(rng.choice([-1, 1], size=n_out))
    ids.append(np.full(n_out, -1))
    t = np.concatenate(ts)
    order = np.argsort(t, kind="stable")
    star_id = np.concatenate(ids)[order]
    stream = EventStream(
        t[order], np.concatenate(xs)[order], np.concatenate(ys)[order], np.concatenate(ps)[order], w, h
    )
    truth = GroundTruth(profile, duration_us, dt_us)
    return SimulatedStream(stream, truth, star_id < 0, star_id)
