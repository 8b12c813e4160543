"""Anchored chordal rotation averaging over the time grid.

Unknowns are one attitude per grid time referenced by a measurement plus a
gauge ("dummy") rotation ``G``. Edge ``(a, b, Rab)`` asks for
``R_a ~ Rab @ R_b``; anchor ``(g, Rg)`` asks for ``R_g ~ Rg @ G``. Each
Gauss-Seidel sweep replaces every node, in time order and the gauge last, by
the SO(3) projection of the weighted sum of its neighbours' predictions, which
exactly minimises the squared chordal cost of that node's terms. The final
attitudes are right-multiplied by ``G^T`` so the gauge becomes the identity.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numba as nb
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fileio import write_rotations_csv
from .geom import angular_distance, project_to_so3


class GraphError(ValueError):
    pass


class NoAnchorWarning(UserWarning):
    pass


@dataclass
class AttitudeGraph:
    nodes: np.ndarray  # sorted times (us)
    edge_i: np.ndarray  # node index of alpha
    edge_j: np.ndarray  # node index of beta
    edge_R: np.ndarray  # (m, 3, 3) measured R_{alpha, beta}
    anchor_i: np.ndarray
    anchor_R: np.ndarray  # (k, 3, 3)
    anchor_weight: float = 10.0
    dt_us: int = 50_000

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def index(self, t: int) -> int:
        i = int(np.searchsorted(self.nodes, t))
        if i == len(self.nodes) or self.nodes[i] != t:
            raise KeyError(t)
        return i


@dataclass
class AttitudeSolution:
    times: np.ndarray
    attitudes: np.ndarray  # (n, 3, 3)
    gauge: np.ndarray  # dummy attitude after the solve (identity once re-oriented)
    iterations: int = 0
    converged: bool = True
    edge_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    anchor_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective_history: list = field(default_factory=list)  # squared surrogate per sweep
    wall_time_s: float = 0.0

    def as_dict(self) -> dict:
        return {int(t): R for t, R in zip(self.times, self.attitudes)}

    def attitude(self, t: int) -> np.ndarray:
        i = int(np.searchsorted(self.times, t))
        if i == len(self.times) or self.times[i] != t:
            raise KeyError(t)
        return self.attitudes[i]

    def to_csv(self, path) -> None:
        """``t_us,r00..r22,flag`` where flag is 1 for a converged solve."""
        flag = 1 if self.converged else 0
        with open(path, "w") as fh:
            fh.write("t_us," + ",".join(f"r{i}{j}" for i in range(3) for j in range(3)) + ",flag\n")
            for t, R in zip(self.times, self.attitudes):
                fh.write(f"{int(t)}," + ",".join(repr(float(v)) for v in R.ravel()) + f",{flag}\n")


def _components(n: int, pairs) -> np.ndarray:
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return np.array([find(i) for i in range(n)])


def build_graph(edges, anchors=None, dt_us: int = 50_000, anchor_weight: float = 10.0) -> AttitudeGraph:
    """Graph over the grid times referenced by ``edges`` (``(alpha, beta, R)`` or objects with those fields).

    ``anchors`` maps time to measured absolute attitude. Anchors tie their
    nodes to the gauge, so connectivity is checked on edges plus anchors.
    """
    anchors = dict(anchors or {})
    trip = []
    for e in edges:
        a, b, R = (e.alpha, e.beta, e.R) if hasattr(e, "alpha") else e
        trip.append((int(a), int(b), np.asarray(R, dtype=float)))
    if not trip:
        raise GraphError("no relative-rotation edges")
    if anchor_weight <= 0:
        raise ValueError("anchor_weight must be positive")
    for a, b, _ in trip:
        if a % dt_us or b % dt_us:
            raise GraphError(f"edge [{a}, {b}] is not on the {dt_us} us grid")
        if a >= b:
            raise GraphError(f"edge [{a}, {b}] has non-positive duration")
    for g in anchors:
        if int(g) % dt_us:
            raise GraphError(f"anchor at {g} us is not on the {dt_us} us grid")
    nodes = np.unique([t for a, b, _ in trip for t in (a, b)]).astype(np.int64)
    missing = [g for g in anchors if not np.any(nodes == int(g))]
    if missing:
        raise GraphError(f"anchor times {sorted(missing)} are not touched by any edge")
    pos = {int(t): i for i, t in enumerate(nodes)}
    ei = np.array([pos[a] for a, _, _ in trip], dtype=np.int64)
    ej = np.array([pos[b] for _, b, _ in trip], dtype=np.int64)
    ai = np.array([pos[int(g)] for g in sorted(anchors)], dtype=np.int64)
    aR = np.array([np.asarray(anchors[g], dtype=float) for g in sorted(anchors)]).reshape(-1, 3, 3)
    # the gauge is node n; anchors connect to it
    comp = _components(len(nodes) + 1, list(zip(ei, ej)) + [(i, len(nodes)) for i in ai])
    roots = np.unique(comp[: len(nodes)])
    if len(roots) > 1:
        spans = sorted((int(nodes[comp[: len(nodes)] == r].min()), int(nodes[comp[: len(nodes)] == r].max())) for r in roots)
        desc = "; ".join(f"{lo}..{hi} us" for lo, hi in spans)
        raise GraphError(f"attitude graph has {len(roots)} components ({desc}); every component needs an "
                         "anchor (with the default bank the odd multiples of 50 ms form their own component)")
    if len(ai) == 0:
        warnings.warn("no anchors: attitudes are gauged to the first node = I", NoAnchorWarning, stacklevel=2)
    return AttitudeGraph(nodes, ei, ej, np.array([R for _, _, R in trip]), ai, aR, float(anchor_weight), dt_us)


@nb.njit(cache=True)
def _proj(M, out):
    if M[0, 0] == 0.0 and np.abs(M).max() == 0.0:
        return False
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        for r in range(3):
            U[r, 2] = -U[r, 2]
        R = U @ Vt
    out[:, :] = R
    return True


@nb.njit(cache=True)
def _angle(A, B):
    d = 0.0
    for r in range(3):
        for c in range(3):
            d += (A[r, c] - B[r, c]) ** 2
    x = np.sqrt(d) / (2.0 * np.sqrt(2.0))
    return 2.0 * np.arcsin(min(1.0, x))


@nb.njit(cache=True)
def _surrogate(X, G, ei, ej, eR, ai, aR, w):
    f = 0.0
    for e in range(ei.shape[0]):
        D = X[ei[e]] - eR[e] @ X[ej[e]]
        f += np.sum(D * D)
    for k in range(ai.shape[0]):
        D = X[ai[k]] - aR[k] @ G
        f += w * np.sum(D * D)
    return f


@nb.njit(cache=True)
def _gs_sweeps(X, G, ptr, inc, ei, ej, eR, ai, aR, aptr, ainc, w, max_iters, tol, hist):
    """Gauss-Seidel sweeps; returns (iterations, converged). ``hist`` receives the surrogate after each sweep."""
    n = X.shape[0]
    M = np.zeros((3, 3))
    Rn = np.zeros((3, 3))
    has_anchor = ai.shape[0] > 0
    for it in range(max_iters):
        worst = 0.0
        for v in range(n):
            M[:, :] = 0.0
            for q in range(ptr[v], ptr[v + 1]):
                e = inc[q]
                if ei[e] == v:
                    M += eR[e] @ X[ej[e]]
                else:
                    M += eR[e].T @ X[ei[e]]
            for q in range(aptr[v], aptr[v + 1]):
                M += w * (aR[ainc[q]] @ G)
            if _proj(M, Rn):
                a = _angle(Rn, X[v])
                if a > worst:
                    worst = a
                X[v] = Rn
        if has_anchor:
            M[:, :] = 0.0
            for k in range(ai.shape[0]):
                M += aR[k].T @ X[ai[k]]
            if _proj(M, Rn):
                a = _angle(Rn, G)
                if a > worst:
                    worst = a
                G[:, :] = Rn
        hist[it] = _surrogate(X, G, ei, ej, eR, ai, aR, w)
        if worst < tol:
            return it + 1, True
    return max_iters, False


def _hat_batch(v):
    """(k, 3) -> (k, 3, 3) cross-product matrices."""
    H = np.zeros(v.shape[:-1] + (3, 3))
    H[..., 0, 1], H[..., 0, 2] = -v[..., 2], v[..., 1]
    H[..., 1, 0], H[..., 1, 2] = v[..., 2], -v[..., 0]
    H[..., 2, 0], H[..., 2, 1] = -v[..., 1], v[..., 0]
    return H


def _column_jacobian(X):
    """d vec((I + [a]x) X) / da for a stack of matrices, vec taken column by column: (k, 9, 3)."""
    return -_hat_batch(np.swapaxes(X, -1, -2)).reshape(X.shape[0], 9, 3)


def _exp_batch(a):
    th = np.linalg.norm(a, axis=1)
    K = _hat_batch(a / np.where(th > 0, th, 1.0)[:, None])
    s, c = np.sin(th)[:, None, None], (1 - np.cos(th))[:, None, None]
    return np.eye(3) + s * K + c * (K @ K)


def _global_step(graph: AttitudeGraph, X, G, gauge_free: bool):
    """One Gauss-Newton step on the squared chordal cost over every node (and the gauge) at once.

    Unknowns are left perturbations ``exp([a]x) X``. Without anchors node 0 is held fixed.
    Returns the candidate ``(X, G)``.
    """
    n = X.shape[0]
    nv = n + 1
    ei, ej, eR = graph.edge_i, graph.edge_j, graph.edge_R
    cvec = lambda M: np.swapaxes(M, -1, -2).reshape(M.shape[0], 9)
    Ji = _column_jacobian(X[ei])
    # R~ applied to each per-column block
    Jj = -(eR[:, None] @ _column_jacobian(X[ej]).reshape(-1, 3, 3, 3)).reshape(-1, 9, 3)
    r = cvec(X[ei] - eR @ X[ej])
    rows, cols, blocks = [], [], []
    gvec = np.zeros((nv, 3))

    def add(a, b, Ja, Jb, ra, wt):
        JaT = np.swapaxes(Ja, 1, 2)
        blocks.extend([wt * JaT @ Ja, wt * JaT @ Jb, wt * np.swapaxes(Jb, 1, 2) @ Ja, wt * np.swapaxes(Jb, 1, 2) @ Jb])
        rows.extend([a, a, b, b])
        cols.extend([a, b, a, b])
        np.add.at(gvec, a, wt * np.einsum("kij,ki->kj", Ja, ra))
        np.add.at(gvec, b, wt * np.einsum("kij,ki->kj", Jb, ra))

    add(ei, ej, Ji, Jj, r, 1.0)
    if len(graph.anchor_i):
        ai, aR = graph.anchor_i, graph.anchor_R
        Ja = _column_jacobian(X[ai])
        Jg = -(aR[:, None] @ _column_jacobian(np.repeat(G[None], len(ai), 0)).reshape(-1, 3, 3, 3)).reshape(-1, 9, 3)
        ra = cvec(X[ai] - aR @ G)
        add(ai, np.full(len(ai), n), Ja, Jg, ra, graph.anchor_weight)
    bi = np.concatenate(rows)
    bj = np.concatenate(cols)
    B = np.concatenate(blocks)
    ii = (3 * bi[:, None, None] + np.arange(3)[None, :, None]).repeat(3, 2)
    jj = (3 * bj[:, None, None] + np.arange(3)[None, None, :]).repeat(3, 1)
    Hm = sp.coo_matrix((B.ravel(), (ii.ravel(), jj.ravel())), shape=(3 * nv, 3 * nv)).tocsc()
    keep = np.ones(3 * nv, bool)
    if gauge_free:
        keep[3 * n:] = False  # gauge unused
        keep[:3] = False  # node 0 fixed
    idx = np.flatnonzero(keep)
    step = np.zeros(3 * nv)
    step[idx] = spla.spsolve(Hm[idx][:, idx], -gvec.ravel()[idx])
    if not np.all(np.isfinite(step)):
        return None
    D = _exp_batch(step.reshape(nv, 3))
    return D[:n] @ X, D[n] @ G


def solve(graph: AttitudeGraph, max_iters: int = 500, tol: float = 1e-6, init=None,
          global_step_every: int = 10) -> AttitudeSolution:
    """Gauss-Seidel chordal averaging from all-identity (or ``init``), then re-orientation.

    Every ``global_step_every`` sweeps a global Gauss-Newton step over all
    nodes is tried and kept only if it lowers the squared cost, which removes
    the slow long-wavelength error modes of pure sweeping on long chains.
    ``global_step_every=0`` gives plain Gauss-Seidel. Iterations count sweeps.
    """
    t0 = time.perf_counter()
    n, m = graph.n_nodes, len(graph.edge_i)
    ends = np.concatenate([graph.edge_i, graph.edge_j])
    order = np.argsort(ends, kind="stable")
    inc = (order % m).astype(np.int64)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, ends + 1, 1)
    ptr = np.cumsum(ptr)
    aorder = np.argsort(graph.anchor_i, kind="stable").astype(np.int64)
    aptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(aptr, graph.anchor_i + 1, 1)
    aptr = np.cumsum(aptr)
    X = np.tile(np.eye(3), (n, 1, 1)) if init is None else np.array(init, dtype=float).copy()
    G = np.eye(3)
    eR = np.ascontiguousarray(graph.edge_R)
    aR = np.ascontiguousarray(graph.anchor_R) if len(graph.anchor_i) else np.zeros((0, 3, 3))
    w = graph.anchor_weight
    free = len(graph.anchor_i) == 0
    hist = []
    iters, ok = 0, False
    block = global_step_every if global_step_every > 0 else max_iters
    buf = np.zeros(max(block, 1))
    while iters < max_iters and not ok:
        k = min(block, max_iters - iters)
        done, ok = _gs_sweeps(X, G, ptr, inc, graph.edge_i, graph.edge_j, eR, graph.anchor_i, aR, aptr,
                              aorder, w, k, tol, buf)
        hist.extend(buf[:done].tolist())
        iters += done
        if ok or global_step_every <= 0 or iters >= max_iters:
            break
        cand = _global_step(graph, X, G, free)
        if cand is not None:
            Xc, Gc = cand
            fc = _surrogate(Xc, Gc, graph.edge_i, graph.edge_j, eR, graph.anchor_i, aR, w)
            if fc < hist[-1]:
                X[:], G[:] = Xc, Gc
                hist[-1] = fc  # the sweep's recorded value is superseded by the accepted step
    sol = AttitudeSolution(graph.nodes.copy(), X, G.copy(), iters, bool(ok), objective_history=hist)
    sol = re_orient(sol, X[0].copy() if free else G)
    sol.edge_residuals, sol.anchor_residuals = residuals(graph, sol.attitudes, np.eye(3))
    sol.wall_time_s = time.perf_counter() - t0
    return sol


def re_orient(sol: AttitudeSolution, dummy: np.ndarray) -> AttitudeSolution:
    """Right-multiply every attitude (and the gauge) by ``dummy^T``."""
    Q = np.asarray(dummy, dtype=float).T
    return AttitudeSolution(
        sol.times, sol.attitudes @ Q, sol.gauge @ Q, sol.iterations, sol.converged,
        sol.edge_residuals, sol.anchor_residuals, list(sol.objective_history), sol.wall_time_s,
    )


def residuals(graph: AttitudeGraph, X, G=None) -> tuple[np.ndarray, np.ndarray]:
    """Unsquared Frobenius residual of every edge and every anchor."""
    G = np.eye(3) if G is None else G
    X = np.asarray(X)
    er = np.linalg.norm(X[graph.edge_i] - graph.edge_R @ X[graph.edge_j], axis=(1, 2))
    if len(graph.anchor_i):
        ar = np.linalg.norm(X[graph.anchor_i] - graph.anchor_R @ G, axis=(1, 2))
    else:
        ar = np.zeros(0)
    return er, ar


def objective(graph: AttitudeGraph, X, G=None) -> float:
    """The printed cost: edge residuals plus ``anchor_weight`` times anchor residuals (unsquared)."""
    er, ar = residuals(graph, X, G)
    return float(er.sum() + graph.anchor_weight * ar.sum())


def surrogate_objective(graph: AttitudeGraph, X, G=None) -> float:
    """Squared form minimised by each node update."""
    er, ar = residuals(graph, X, G)
    return float((er ** 2).sum() + graph.anchor_weight * (ar ** 2).sum())


def chain_relatives(edges, anchor_time: int, anchor_R) -> AttitudeSolution:
    """Dead reckoning: compose the finest consecutive edges forward and backward from one anchor.

    From each reached time the shortest edge starting (forward) or ending
    (backward) there is followed. Raises if the chain stops before the last
    (or first) time any edge touches.
    """
    trip = [(e.alpha, e.beta, e.R) if hasattr(e, "alpha") else e for e in edges]
    if not trip:
        raise GraphError("no edges to chain")
    fwd, bwd = {}, {}
    for a, b, R in trip:
        a, b = int(a), int(b)
        if a not in fwd or b - a < fwd[a][0] - a:
            fwd[a] = (b, np.asarray(R, dtype=float))
        if b not in bwd or b - a < b - bwd[b][0]:
            bwd[b] = (a, np.asarray(R, dtype=float))
    t_min = min(a for a, _, _ in trip)
    t_max = max(b for _, b, _ in trip)
    out = {int(anchor_time): np.asarray(anchor_R, dtype=float)}
    t = int(anchor_time)
    while t < t_max:
        if t not in fwd:
            raise GraphError(f"chain gap after {t} us")
        b, R = fwd[t]
        out[b] = project_to_so3(R.T @ out[t])  # R_a = R_ab R_b
        t = b
    t = int(anchor_time)
    while t > t_min:
        if t not in bwd:
            raise GraphError(f"chain gap before {t} us")
        a, R = bwd[t]
        out[a] = project_to_so3(R @ out[t])
        t = a
    times = np.array(sorted(out), dtype=np.int64)
    return AttitudeSolution(times, np.array([out[int(x)] for x in times]), np.eye(3))


def write_residuals_csv(path, graph: AttitudeGraph, sol: AttitudeSolution) -> None:
    """Per-edge chordal error: ``alpha_us,beta_us,residual,angle_deg``."""
    X = sol.attitudes
    with open(path, "w") as fh:
        fh.write("alpha_us,beta_us,residual,angle_deg\n")
        for i, j, R in zip(graph.edge_i, graph.edge_j, graph.edge_R):
            pred = R @ X[j]
            fh.write(f"{int(graph.nodes[i])},{int(graph.nodes[j])},{np.linalg.norm(X[i] - pred)!r},"
                     f"{np.rad2deg(angular_distance(X[i], pred))!r}\n")


def write_solution_csv(path, sol: AttitudeSolution) -> None:
    sol.to_csv(path)


__all__ = [
    "AttitudeGraph", "AttitudeSolution", "GraphError", "NoAnchorWarning", "build_graph", "solve",
    "re_orient", "residuals", "objective", "surrogate_objective", "chain_relatives",
    "write_residuals_csv", "write_solution_csv", "write_rotations_csv",
]
