"""Plain-text formats: rotation CSVs, edge CSVs and key=value configuration files."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

_RCOLS = [f"r{i}{j}" for i in range(3) for j in range(3)]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_rotations_csv(path, times, rotations) -> None:
    """``t_us,r00..r22`` with one row-major rotation per line."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_us", *_RCOLS])
        for t, R in zip(times, rotations):
            w.writerow([int(t), *map(_fmt, np.asarray(R).ravel())])


def read_rotations_csv(path) -> tuple[np.ndarray, np.ndarray]:
    rows = _read_table(path, ["t_us", *_RCOLS])
    if not rows:
        return np.zeros(0, np.int64), np.zeros((0, 3, 3))
    t = np.array([_int(path, i, r, "t_us") for i, r in rows], dtype=np.int64)
    return t, np.array([_rotation(path, i, r) for i, r in rows])


def write_edges_csv(path, edges) -> None:
    """``alpha_us,beta_us,r00..r22`` for ``(alpha, beta, R)`` tuples or objects with those fields."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha_us", "beta_us", *_RCOLS])
        for e in edges:
            a, b, R = (e.alpha, e.beta, e.R) if hasattr(e, "alpha") else e
            w.writerow([int(a), int(b), *map(_fmt, np.asarray(R).ravel())])


class CSVFormatError(ValueError):
    def __init__(self, path, row: int, msg: str):
        super().__init__(f"{path}: row {row}: {msg}")
        self.row = row


def _read_table(path, required) -> list[tuple[int, dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise CSVFormatError(path, 1, f"missing columns {missing}")
        # data rows are numbered from 2 (the header is row 1)
        return [(i, r) for i, r in enumerate(reader, 2)]


def _rotation(path, i, r) -> np.ndarray:
    try:
        return np.array([float(r[c]) for c in _RCOLS]).reshape(3, 3)
    except (TypeError, ValueError) as exc:
        raise CSVFormatError(path, i, f"bad rotation entry ({exc})") from None


def _int(path, i, r, key) -> int:
    try:
        return int(r[key])
    except (TypeError, ValueError):
        raise CSVFormatError(path, i, f"bad integer {key}={r[key]!r}") from None


def read_edges_csv(path) -> list[tuple[int, int, np.ndarray]]:
    return [
        (_int(path, i, r, "alpha_us"), _int(path, i, r, "beta_us"), _rotation(path, i, r))
        for i, r in _read_table(path, ["alpha_us", "beta_us", *_RCOLS])
    ]


def read_kv(path) -> dict:
    """``key=value`` lines; ``#`` starts a comment. Values stay strings."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_kv(path, kv: dict) -> None:
    with open(path, "w") as fh:
        for k, v in kv.items():
            fh.write(f"{k}={v}\n")
