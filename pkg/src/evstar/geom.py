"""Rotation algebra, pinhole camera model and angular distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_DEFAULT_AXIS = np.array([1.0, 0.0, 0.0])


class ProjectionError(ValueError):
    """Raised when a ray cannot be projected (zero or negative depth)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_file(cls, path) -> "CameraIntrinsics":
        """Read a ``key=value`` intrinsics file with fx, fy, cx, cy entries."""
        vals = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
                k, v = (s.strip() for s in line.split("=", 1))
                vals[k] = float(v)
        missing = {"fx", "fy", "cx", "cy"} - vals.keys()
        if missing:
            raise ValueError(f"{path}: missing intrinsics {sorted(missing)}")
        return cls(vals["fx"], vals["fy"], vals["cx"], vals["cy"])

    def to_text(self) -> str:
        return f"fx={self.fx!r}\nfy={self.fy!r}\ncx={self.cx!r}\ncy={self.cy!r}\n"


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(W: np.ndarray) -> np.ndarray:
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def backproject(x, intr: CameraIntrinsics) -> np.ndarray:
    """Unit ray(s) through pixel(s) ``x`` (shape (2,) or (N, 2))."""
    x = np.asarray(x, dtype=float)
    rays = np.stack(
        [(x[..., 0] - intr.cx) / intr.fx, (x[..., 1] - intr.cy) / intr.fy, np.ones(x.shape[:-1])],
        axis=-1,
    )
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def project(ray, intr: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates of ray(s); raises ProjectionError for non-positive depth."""
    ray = np.asarray(ray, dtype=float)
    depth = ray[..., 2]
    if np.any(depth <= 0):
        raise ProjectionError("ray has zero or negative depth")
    return np.stack(
        [intr.fx * ray[..., 0] / depth + intr.cx, intr.fy * ray[..., 1] / depth + intr.cy], axis=-1
    )


def exp_rotation(theta: float, axis) -> np.ndarray:
    """Rodrigues' formula for a rotation of ``theta`` radians about unit ``axis``."""
    K = hat(axis)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def exp_so3(w) -> np.ndarray:
    """Exponential map of a rotation vector."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-300:
        return np.eye(3)
    return exp_rotation(theta, w / theta)


def log_rotation(R: np.ndarray) -> tuple[float, np.ndarray]:
    """Angle in [0, pi] and unit axis of ``R``.

    At theta = 0 the axis is fixed to (1, 0, 0). Near pi the axis is read off the
    dominant column of ``R + R^T`` instead of the vanishing skew part.
    """
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    skew = vee(R - R.T) / 2.0  # = sin(theta) * axis
    s = np.linalg.norm(skew)
    theta = float(np.arctan2(s, c))
    if theta == 0.0:
        return 0.0, _DEFAULT_AXIS.copy()
    if c > -0.9:
        return theta, skew / s
    # R + R^T = 2 cos(theta) I + 2 (1 - cos(theta)) a a^T
    S = (R + R.T) / 2.0 - c * np.eye(3)
    k = int(np.argmax(np.diag(S)))
    a = S[:, k] / np.sqrt(S[k, k])
    if np.dot(a, skew) < 0:
        a = -a
    return theta, a / np.linalg.norm(a)


def log_so3(R: np.ndarray) -> np.ndarray:
    theta, a = log_rotation(R)
    return theta * a


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Closest rotation to ``M`` in Frobenius norm."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def angular_distance(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle between two rotations, via the chordal distance."""
    chord = np.linalg.norm(np.asarray(R1) - np.asarray(R2)) / (2.0 * np.sqrt(2.0))
    return float(2.0 * np.arcsin(min(max(chord, 0.0), 1.0)))


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R)
    return (
        R.shape == (3, 3)
        and np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0)
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
