"""The synthetic evaluation suite shared by the acceptance tests, scripts and CLI.

A suite instance is a random 20-star field rotating at a constant 4 deg/s
about a random axis, with sub-pixel noise and 5% spurious events. The Hough
settings are tuned for it: the threshold grows with the window (about 0.6
events per ms, i.e. most of one star's track at 1 kHz per star) and the
time axis is scaled so every window spans 30 scaled units.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bank import BankConfig
from .events import EventChunk, chunk_stream
from .geom import CameraIntrinsics
from .hough import HoughConfig
from .sim import MotionProfile, generate_events, generate_scene


@dataclass(frozen=True)
class SuiteConfig:
    n_stars: int = 20
    fov_deg: float = 30.0
    omega_deg_s: float = 4.0
    rate_hz: float = 1000.0
    pixel_noise: float = 0.5
    outlier_ratio: float = 0.05
    min_separation_px: float = 10.0
    subdivision_level: int = 3
    bin_size: float = 3.0
    delta_per_ms: float = 0.6
    scaled_extent: float = 30.0


def suite_hough(resolution_ms: float, cfg: SuiteConfig = SuiteConfig()) -> HoughConfig:
    return HoughConfig(
        subdivision_level=cfg.subdivision_level,
        delta=max(2, int(round(cfg.delta_per_ms * resolution_ms))),
        bin_size=cfg.bin_size,
        time_scale_ms=cfg.scaled_extent / resolution_ms,
    )


def suite_bank_config(resolutions_ms=(400, 200, 100), dt_ms: int = 50, cfg: SuiteConfig = SuiteConfig()) -> BankConfig:
    per = {int(r): suite_hough(r, cfg) for r in resolutions_ms}
    return BankConfig(resolutions_ms=tuple(resolutions_ms), dt_ms=dt_ms, hough=per[min(per)], per_resolution=per)


@dataclass
class SuiteCase:
    chunk: EventChunk
    R_true: np.ndarray
    intrinsics: CameraIntrinsics
    seed: int


def suite_case(seed: int, duration_us: int = 100_000, cfg: SuiteConfig = SuiteConfig()) -> SuiteCase:
    rng = np.random.default_rng(1000 + seed)
    scene = generate_scene(cfg.n_stars, cfg.fov_deg, seed=seed, min_separation_px=cfg.min_separation_px)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    profile = MotionProfile.constant(np.deg2rad(cfg.omega_deg_s) * axis, duration_us)
    sim = generate_events(scene, profile, duration_us, cfg.rate_hz, cfg.pixel_noise, cfg.outlier_ratio, seed=seed)
    chunk = chunk_stream(sim.events, 0, duration_us)
    return SuiteCase(chunk, sim.truth.relative(0, duration_us), scene.intrinsics, seed)


def with_overrides(cfg: SuiteConfig, **kw) -> SuiteConfig:
    return replace(cfg, **kw)
