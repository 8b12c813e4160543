"""Constant-angular-velocity event warping and the contrast-maximisation baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import Event, EventChunk
from .geom import CameraIntrinsics, exp_rotation, exp_so3, log_rotation
from .hough import RelativeRotation
from .sim import _rodrigues_batch


class OptimizerError(RuntimeError):
    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class WarpParams:
    theta: float
    axis: tuple
    window: tuple[int, int]

    def __post_init__(self):
        if not 0 <= self.theta <= math.pi:
            raise ValueError("theta must lie in [0, pi]")
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("axis must be a unit vector")

    @classmethod
    def from_rotvec(cls, w, window) -> "WarpParams":
        w = np.asarray(w, dtype=float)
        theta = float(np.linalg.norm(w))
        if theta == 0.0:
            return cls(0.0, (1.0, 0.0, 0.0), tuple(window))
        theta_c, a = log_rotation(exp_so3(w))
        return cls(theta_c, tuple(a), tuple(window))

    @property
    def rotvec(self) -> np.ndarray:
        return self.theta * np.asarray(self.axis)


@dataclass
class CompensatedImage:
    H: np.ndarray  # (height, width)
    kernel_sigma: float
    params: WarpParams
    use_polarity: bool


def warp_points(t, x, y, rotvec, alpha: int, beta: int, intr: CameraIntrinsics):
    """Warp pixels observed at times ``t`` back to ``alpha``.

    Returns warped x, y and a mask of events that stay in front of the camera.
    """
    t = np.asarray(t, dtype=np.float64)
    frac = (t - alpha) / float(beta - alpha)
    rays = np.column_stack([(np.asarray(x) - intr.cx) / intr.fx, (np.asarray(y) - intr.cy) / intr.fy, np.ones(len(t))])
    Rs = _rodrigues_batch(frac[:, None] * np.asarray(rotvec, dtype=float)[None, :])
    rr = np.einsum("nij,nj->ni", Rs, rays)
    ok = rr[:, 2] > 0
    depth = np.where(ok, rr[:, 2], 1.0)
    return intr.fx * rr[:, 0] / depth + intr.cx, intr.fy * rr[:, 1] / depth + intr.cy, ok


def warp_event(e: Event, params: WarpParams, intr: CameraIntrinsics):
    """Warped pixel of one event, or None if it rotates behind the camera."""
    alpha, beta = params.window
    if not alpha <= e.t <= beta:
        raise ValueError("event outside warp window")
    xw, yw, ok = warp_points([e.t], [e.x], [e.y], params.rotvec, alpha, beta, intr)
    if not ok[0]:
        return None
    return np.array([xw[0], yw[0]])


_TAPER_START = 2.75  # in sigmas; the kernel is exactly Gaussian inside this radius and zero beyond 3


def _splat(xw, yw, weights, width, height, sigma) -> np.ndarray:
    r = int(math.ceil(3.0 * sigma))
    offs = np.arange(-r, r + 1)
    bx = np.floor(xw).astype(np.int64)
    by = np.floor(yw).astype(np.int64)
    px = bx[:, None] + offs[None, :]  # (N, k)
    py = by[:, None] + offs[None, :]
    dx2 = (px - xw[:, None]) ** 2
    dy2 = (py - yw[:, None]) ** 2
    d2 = dy2[:, :, None] + dx2[:, None, :]  # (N, ky, kx)
    k = np.exp(-d2 / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)
    # smoothstep taper over the last quarter sigma keeps the contrast differentiable in the warp
    u = np.clip((9.0 - d2 / (sigma * sigma)) / (9.0 - _TAPER_START**2), 0.0, 1.0)
    k *= u * u * (3.0 - 2.0 * u)
    k *= weights[:, None, None]
    valid = (py[:, :, None] >= 0) & (py[:, :, None] < height) & (px[:, None, :] >= 0) & (px[:, None, :] < width)
    flat = py[:, :, None] * width + px[:, None, :]
    H = np.bincount(flat[valid], weights=k[valid], minlength=width * height)
    return H.reshape(height, width)


def render_h_image(
    chunk: EventChunk,
    params: WarpParams,
    intr: CameraIntrinsics,
    kernel_sigma: float = 1.0,
    use_polarity: bool = True,
) -> CompensatedImage:
    """Motion-compensated event image: Gaussian kernels (tapered to zero at 3 sigma) at warped positions."""
    if kernel_sigma <= 0:
        raise ValueError("kernel_sigma must be positive")
    width, height = chunk.sensor
    ev = chunk.events
    if chunk.empty:
        return CompensatedImage(np.zeros((height, width)), kernel_sigma, params, use_polarity)
    xw, yw, ok = warp_points(ev.t, ev.x, ev.y, params.rotvec, chunk.alpha, chunk.beta, intr)
    w = ev.p.astype(float) if use_polarity else np.ones(len(ev))
    H = _splat(xw[ok], yw[ok], w[ok], width, height, kernel_sigma)
    return CompensatedImage(H, kernel_sigma, params, use_polarity)


def variance_contrast(image) -> float:
    H = image.H if isinstance(image, CompensatedImage) else np.asarray(image)
    if H.size == 0:
        raise ValueError("empty image")
    return float(np.mean((H - H.mean()) ** 2))


@dataclass
class CMOptions:
    kernel_sigma: float = 1.0
    use_polarity: bool = False
    fd_step: float = 1e-5  # rad
    max_step: float = 1e-2  # rad, first trial step of every line search
    min_step: float = 1e-7  # rad
    max_iters: int = 200
    armijo: float = 1e-4
    shrink: float = 0.5

    def __post_init__(self):
        if not self.kernel_sigma > 0:
            raise ValueError("kernel_sigma must be positive")
        if not (0 < self.min_step <= self.max_step and 0 < self.fd_step):
            raise ValueError("steps must be positive with min_step <= max_step")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


@dataclass
class CMTrace:
    objective: list = field(default_factory=list)
    rotvecs: list = field(default_factory=list)
    n_evals: int = 0
    converged: bool = False


class ContrastObjective:
    """Variance of the compensated image as a function of the rotation vector."""

    def __init__(self, chunk: EventChunk, intr: CameraIntrinsics, opts: CMOptions):
        self.chunk, self.intr, self.opts = chunk, intr, opts
        ev = chunk.events
        self._t = ev.t.astype(np.float64)
        self._x, self._y = ev.x, ev.y
        self._w = ev.p.astype(float) if opts.use_polarity else np.ones(len(ev))
        self.n_evals = 0

    def __call__(self, w) -> float:
        self.n_evals += 1
        c = self.chunk
        xw, yw, ok = warp_points(self._t, self._x, self._y, w, c.alpha, c.beta, self.intr)
        H = _splat(xw[ok], yw[ok], self._w[ok], c.sensor[0], c.sensor[1], self.opts.kernel_sigma)
        return variance_contrast(H)

    def gradient(self, w, h=None) -> np.ndarray:
        h = self.opts.fd_step if h is None else h
        w = np.asarray(w, dtype=float)
        g = np.empty(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            g[i] = (self(w + e) - self(w - e)) / (2.0 * h)
        return g


def cm_estimate(chunk: EventChunk, intr: CameraIntrinsics, opts: CMOptions | None = None, trace: CMTrace | None = None) -> RelativeRotation:
    """Maximise image contrast over the rotation vector by finite-difference gradient ascent.

    Each iteration backtracks along the gradient from a trial step of length
    ``opts.max_step`` until the Armijo condition holds. Starts at zero motion
    and stops when the accepted step is shorter than ``opts.min_step`` or after
    ``opts.max_iters`` iterations.
    """
    opts = opts or CMOptions()
    if chunk.empty:
        raise ValueError("cannot estimate motion from an empty chunk")
    trace = trace if trace is not None else CMTrace()
    f = ContrastObjective(chunk, intr, opts)
    w = np.zeros(3)
    fw = f(w)
    trace.objective.append(fw)
    trace.rotvecs.append(w.copy())
    for _ in range(opts.max_iters):
        if not np.isfinite(fw):
            raise OptimizerError("objective is not finite", {"rotvec": w.tolist(), "n_evals": f.n_evals})
        g = f.gradient(w)
        gn = float(np.linalg.norm(g))
        if not np.isfinite(gn):
            raise OptimizerError("gradient is not finite", {"rotvec": w.tolist(), "n_evals": f.n_evals})
        if gn == 0.0:
            trace.converged = True
            break
        t = opts.max_step / gn
        while t * gn >= opts.min_step:
            fc = f(w + t * g)
            if fc >= fw + opts.armijo * t * gn * gn:
                break
            t *= opts.shrink
        step = t * gn
        if step < opts.min_step:
            trace.converged = True
            break
        w, fw = w + t * g, fc
        trace.objective.append(fw)
        trace.rotvecs.append(w.copy())
    trace.n_evals = f.n_evals
    diag = {"n_events": len(chunk), "n_evals": f.n_evals, "iterations": len(trace.objective) - 1,
            "objective": fw, "converged": trace.converged}
    return RelativeRotation(exp_so3(w), chunk.window, 0, diag)


def write_pgm(path, H: np.ndarray) -> tuple[float, float]:
    """Write a 16-bit binary PGM rescaled to [0, 65535]; ``(offset, scale)`` go to a sidecar file.

    Pixel value ``v`` maps back to ``offset + v * scale``.
    """
    H = np.asarray(H, dtype=float)
    lo, hi = float(H.min()), float(H.max())
    scale = (hi - lo) / 65535.0 if hi > lo else 1.0
    img = np.round((H - lo) / scale).astype(">u2")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{H.shape[1]} {H.shape[0]}\n65535\n".encode("ascii"))
        fh.write(img.tobytes())
    with open(path.with_suffix(path.suffix + ".scale"), "w") as fh:
        fh.write(f"offset={lo!r}\nscale={scale!r}\n")
    return lo, scale


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.int64)


__all__ = [
    "WarpParams", "CompensatedImage", "CMOptions", "CMTrace", "ContrastObjective", "OptimizerError",
    "warp_points", "warp_event", "render_h_image", "variance_contrast", "cm_estimate",
    "write_pgm", "read_pgm", "exp_rotation",
]
