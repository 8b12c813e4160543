"""Compiled inner loops for the event-triggered Hough transform.

Cell state is packed into three float64 tables owned by
:class:`evstar.hough.HoughAccumulator`; these functions mutate them in place.

* ``A`` (open-addressing hash table, one row per slot): key, votes, extension
  index, mean, insertion order. Most cells only ever receive one vote and
  such a cell is fully described by its mean (P = I, Sigma = 0), so this is
  all they need. Keeping key and state in one 64-byte row makes a lookup a
  single cache line.
* ``B`` (extension rows, allocated on a cell's second vote): P (row-major),
  singular values, contribution flag and index into ``Ct``.
* ``Ct``: the outer product each cell over threshold last added to C.

Integers stored in float64 columns are exact (all values stay far below 2**53).
"""

import numba as nb
import numpy as np

# counter slots
(N_VISITS, N_QR, N_SVD, N_OUT_OF_GRID, N_DEGENERATE, N_CELLS, N_EVENTS, MAX_SWEEPS,
 N_EXT, N_CONTRIB) = range(10)
N_COUNTERS = 10

# A columns
A_KEY, A_VOTES, A_EXT, A_MEAN, A_ORDER = 0, 1, 2, 3, 6
A_WIDTH = 8
# B columns
B_P, B_SIG, B_HAS, B_CIDX = 0, 9, 12, 13
B_WIDTH = 16

EMPTY = -1.0
_JACOBI_MAX_SWEEPS = 30


@nb.njit(cache=True, nogil=True)
def jacobi_left_svd(E, Pt, s, order, M, V, norms, live):
    """Left singular vectors / values of a small square matrix ``E``.

    One-sided Jacobi on the columns of ``E^T``: the accumulated rotation is an
    orthogonal matrix whose columns are the left singular vectors of ``E``.
    Results are sorted by decreasing singular value (stable, so exact ties keep
    index order). ``M``, ``V``, ``norms`` and ``live`` are n x n / n scratch
    buffers. Returns the number of sweeps used.
    """
    n = E.shape[0]
    for i in range(n):
        for j in range(n):
            M[i, j] = E[j, i]
            V[i, j] = 1.0 if i == j else 0.0
    fro2 = 0.0
    for i in range(n):
        for j in range(n):
            fro2 += M[i, j] * M[i, j]
    tiny = 1e-30 * fro2  # columns below this are numerically zero
    # exactly-zero columns are never touched by rotations of other pairs
    for j in range(n):
        live[j] = False
        for k in range(n):
            if M[k, j] != 0.0:
                live[j] = True
                break
    sweeps = 0
    for sweep in range(_JACOBI_MAX_SWEEPS):
        sweeps = sweep + 1
        rotated = False
        for p in range(n - 1):
            if not live[p]:
                continue
            for q in range(p + 1, n):
                if not live[q]:
                    continue
                a = 0.0
                b = 0.0
                g = 0.0
                for k in range(n):
                    a += M[k, p] * M[k, p]
                    b += M[k, q] * M[k, q]
                    g += M[k, p] * M[k, q]
                if g == 0.0 or a <= tiny or b <= tiny or abs(g) <= 1e-14 * np.sqrt(a * b):
                    continue
                rotated = True
                zeta = (b - a) / (2.0 * g)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                sn = c * t
                for k in range(n):
                    mp = M[k, p]
                    mq = M[k, q]
                    M[k, p] = c * mp - sn * mq
                    M[k, q] = sn * mp + c * mq
                    vp = V[k, p]
                    vq = V[k, q]
                    V[k, p] = c * vp - sn * vq
                    V[k, q] = sn * vp + c * vq
        if not rotated:
            break
    for j in range(n):
        acc = 0.0
        for k in range(n):
            acc += M[k, j] * M[k, j]
        norms[j] = np.sqrt(acc)
    # stable insertion sort, descending
    for j in range(n):
        order[j] = j
    for i in range(1, n):
        key = order[i]
        j = i - 1
        while j >= 0 and norms[order[j]] < norms[key]:
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = key
    for j in range(n):
        s[j] = norms[order[j]]
        for k in range(n):
            Pt[k, j] = V[k, order[j]]
    return sweeps


@nb.njit(cache=True, nogil=True)
def _orthonormalize3(P):
    """Gram-Schmidt pass that repairs columns left undefined by zero singular values."""
    for k in range(3):
        for j in range(k):
            d = P[0, j] * P[0, k] + P[1, j] * P[1, k] + P[2, j] * P[2, k]
            for r in range(3):
                P[r, k] -= d * P[r, j]
        nrm = np.sqrt(P[0, k] ** 2 + P[1, k] ** 2 + P[2, k] ** 2)
        if nrm > 0.5:
            for r in range(3):
                P[r, k] /= nrm
            continue
        if k == 2:
            P[0, 2] = P[1, 0] * P[2, 1] - P[2, 0] * P[1, 1]
            P[1, 2] = P[2, 0] * P[0, 1] - P[0, 0] * P[2, 1]
            P[2, 2] = P[0, 0] * P[1, 1] - P[1, 0] * P[0, 1]
            continue
        # pick the coordinate axis least aligned with the columns so far
        best = 0
        best_val = 2.0
        for ax in range(3):
            val = 0.0
            for j in range(k):
                val += P[ax, j] ** 2
            if val < best_val:
                best_val = val
                best = ax
        for r in range(3):
            P[r, k] = 1.0 if r == best else 0.0
        for j in range(k):
            d = P[best, j]
            for r in range(3):
                P[r, k] -= d * P[r, j]
        nrm = np.sqrt(P[0, k] ** 2 + P[1, k] ** 2 + P[2, k] ** 2)
        for r in range(3):
            P[r, k] /= nrm


@nb.njit(cache=True, nogil=True)
def make_workspace():
    """Scratch buffers reused across cell updates (avoids per-call allocation)."""
    return (
        np.empty(3), np.empty((3, 2)), np.empty((3, 2)), np.empty((3, 2)),
        np.empty((5, 5)), np.empty((5, 5)), np.empty(5), np.empty(5, dtype=np.int64),
        np.empty((3, 3)), np.empty((3, 3)), np.empty(3), np.empty(3),
        np.empty((5, 5)), np.empty((5, 5)), np.empty(5), np.empty(5, dtype=np.bool_),
    )


@nb.njit(cache=True, nogil=True)
def update_pca(votes, mean, P, sig, z, counters, ws):
    """Fold point ``z`` into (mean, P, Sigma); ``votes`` already includes ``z``."""
    if votes == 1:
        for r in range(3):
            mean[r] = z[r]
            sig[r] = 0.0
            for c in range(3):
                P[r, c] = 1.0 if r == c else 0.0
        return
    b, ptb, resid, Bt, E, Pt, s, order, newP = ws[0], ws[1], ws[2], ws[3], ws[4], ws[5], ws[6], ws[7], ws[8]
    n = float(votes)
    f = np.sqrt((n - 1.0) / n)
    for r in range(3):
        b[r] = f * (z[r] - mean[r])
        mean[r] = (n - 1.0) / n * mean[r] + z[r] / n
    # difference matrix [0, b]; its component inside span(P) and the residual
    for c in range(3):
        ptb[c, 0] = 0.0
        ptb[c, 1] = P[0, c] * b[0] + P[1, c] * b[1] + P[2, c] * b[2]
    for r in range(3):
        resid[r, 0] = 0.0
        resid[r, 1] = b[r] - (P[r, 0] * ptb[0, 1] + P[r, 1] * ptb[1, 1] + P[r, 2] * ptb[2, 1])
    # thin QR of the 3x2 residual (Gram-Schmidt); null columns are zero-padded
    bnorm = np.sqrt(b[0] ** 2 + b[1] ** 2 + b[2] ** 2)
    tol = 1e-9 * bnorm
    for c in range(2):
        v0 = resid[0, c]
        v1 = resid[1, c]
        v2 = resid[2, c]
        for j in range(c):
            d = Bt[0, j] * v0 + Bt[1, j] * v1 + Bt[2, j] * v2
            v0 -= d * Bt[0, j]
            v1 -= d * Bt[1, j]
            v2 -= d * Bt[2, j]
        nrm = np.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
        if nrm > tol and nrm > 0.0:
            Bt[0, c] = v0 / nrm
            Bt[1, c] = v1 / nrm
            Bt[2, c] = v2 / nrm
        else:
            Bt[0, c] = 0.0
            Bt[1, c] = 0.0
            Bt[2, c] = 0.0
    counters[N_QR] += 1
    for r in range(5):
        for c in range(5):
            E[r, c] = 0.0
    for r in range(3):
        E[r, r] = sig[r]
        E[r, 3] = ptb[r, 0]
        E[r, 4] = ptb[r, 1]
    for r in range(2):
        for c in range(2):
            E[3 + r, 3 + c] = Bt[0, r] * resid[0, c] + Bt[1, r] * resid[1, c] + Bt[2, r] * resid[2, c]
    sweeps = jacobi_left_svd(E, Pt, s, order, ws[12], ws[13], ws[14], ws[15])
    counters[N_SVD] += 1
    if sweeps > counters[MAX_SWEEPS]:
        counters[MAX_SWEEPS] = sweeps
    for r in range(3):
        for c in range(3):
            acc = 0.0
            for k in range(3):
                acc += P[r, k] * Pt[k, c]
            acc += Bt[r, 0] * Pt[3, c] + Bt[r, 1] * Pt[4, c]
            newP[r, c] = acc
    _orthonormalize3(newP)
    for r in range(3):
        sig[r] = s[r]
        for c in range(3):
            P[r, c] = newP[r, c]


@nb.njit(cache=True, nogil=True)
def _update_packed(votes, A, a, B, e, z, counters, ws):
    """update_pca on the cell stored in row ``a`` of A and row ``e`` of B."""
    P = ws[9]
    mean = ws[10]
    sig = ws[11]
    for r in range(3):
        mean[r] = A[a, A_MEAN + r]
        sig[r] = B[e, B_SIG + r]
        for c in range(3):
            P[r, c] = B[e, B_P + 3 * r + c]
    update_pca(votes, mean, P, sig, z, counters, ws)
    for r in range(3):
        A[a, A_MEAN + r] = mean[r]
        B[e, B_SIG + r] = sig[r]
        for c in range(3):
            B[e, B_P + 3 * r + c] = P[r, c]


@nb.njit(cache=True, nogil=True)
def line_endpoint_rays(mx, my, mt, d0, d1, d2, tau_a, tau_b, centroid, fx, fy, cx, cy, eps_dir, ra, rb):
    """Backprojected end points of the line through ``m`` along ``d`` at scaled times ``tau_a``/``tau_b``.

    Times are in the recentred frame. Returns False if the line is (nearly)
    parallel to the image plane.
    """
    if abs(d2) <= eps_dir:
        return False
    la = (tau_a - mt) / d2
    lb = (tau_b - mt) / d2
    xa = (mx + la * d0 + centroid[0] - cx) / fx
    ya = (my + la * d1 + centroid[1] - cy) / fy
    xb = (mx + lb * d0 + centroid[0] - cx) / fx
    yb = (my + lb * d1 + centroid[1] - cy) / fy
    na = np.sqrt(xa * xa + ya * ya + 1.0)
    nb_ = np.sqrt(xb * xb + yb * yb + 1.0)
    ra[0] = xa / na
    ra[1] = ya / na
    ra[2] = 1.0 / na
    rb[0] = xb / nb_
    rb[1] = yb / nb_
    rb[2] = 1.0 / nb_
    return True


@nb.njit(cache=True, nogil=True)
def _probe(A, key):
    """Row of ``key`` in hash table ``A``: its row if present, else the empty row where it belongs."""
    mask = A.shape[0] - 1
    h = (np.int64(key) * np.int64(-7046029254386353131)) & np.int64(0x7FFFFFFFFFFFFFFF)
    i = (h >> 17) & mask
    fk = float(key)
    while A[i, A_KEY] != EMPTY and A[i, A_KEY] != fk:
        i = (i + 1) & mask
    return i


@nb.njit(cache=True, nogil=True)
def rehash(old, new):
    """Move every occupied row of ``old`` into the empty table ``new``."""
    for i in range(old.shape[0]):
        if old[i, A_KEY] != EMPTY:
            j = _probe(new, np.int64(old[i, A_KEY]))
            for c in range(A_WIDTH):
                new[j, c] = old[i, c]


@nb.njit(cache=True, nogil=True)
def process_events(
    zs, start, stop, dir_lo, dir_hi, rob, A, B, Ct,
    C, counters, centroid, tau_a, tau_b, intr, delta, eps_dir,
    u_min, v_min, bin_size, n_u, n_v,
):
    """Vote recentred points ``zs[start:stop]`` into directions ``[dir_lo, dir_hi)``.

    Returns the index of the first unprocessed point: less than ``stop`` when
    one of the tables needs to grow before the next event (``A`` is kept at
    most half full).
    """
    fx = intr[0]
    fy = intr[1]
    cx = intr[2]
    cy = intr[3]
    ra = np.empty(3)
    rb = np.empty(3)
    z = np.empty(3)
    ws = make_workspace()
    n_dirs = dir_hi - dir_lo
    half = A.shape[0] // 2
    for i in range(start, stop):
        if (counters[N_CELLS] + n_dirs > half or counters[N_EXT] + n_dirs > B.shape[0]
                or counters[N_CONTRIB] + n_dirs > Ct.shape[0]):
            return i
        z[0] = zs[i, 0]
        z[1] = zs[i, 1]
        z[2] = zs[i, 2]
        counters[N_EVENTS] += 1
        for d in range(dir_lo, dir_hi):
            counters[N_VISITS] += 1
            u = rob[d, 0] * z[0] + rob[d, 1] * z[1] + rob[d, 2] * z[2]
            v = rob[d, 3] * z[0] + rob[d, 4] * z[1] + rob[d, 5] * z[2]
            iu = int(np.floor((u - u_min) / bin_size))
            iv = int(np.floor((v - v_min) / bin_size))
            if iu < 0 or iu >= n_u or iv < 0 or iv >= n_v:
                counters[N_OUT_OF_GRID] += 1
                continue
            key = (d * n_u + iu) * n_v + iv
            a = _probe(A, key)
            if A[a, A_KEY] == EMPTY:
                # new cell: its one-vote state is just the point itself
                A[a, A_KEY] = key
                A[a, A_VOTES] = 1.0
                A[a, A_EXT] = EMPTY
                A[a, A_MEAN] = z[0]
                A[a, A_MEAN + 1] = z[1]
                A[a, A_MEAN + 2] = z[2]
                A[a, A_ORDER] = counters[N_CELLS]
                counters[N_CELLS] += 1
                if delta > 1:
                    continue
                nv = 1
            else:
                A[a, A_VOTES] += 1.0
                nv = np.int64(A[a, A_VOTES])
            if A[a, A_EXT] == EMPTY:
                e = counters[N_EXT]
                counters[N_EXT] += 1
                A[a, A_EXT] = e
                for c in range(9):
                    B[e, B_P + c] = 1.0 if c % 4 == 0 else 0.0
                for c in range(3):
                    B[e, B_SIG + c] = 0.0
                B[e, B_HAS] = 0.0
                B[e, B_CIDX] = EMPTY
            else:
                e = np.int64(A[a, A_EXT])
            if nv < delta:
                _update_packed(nv, A, a, B, e, z, counters, ws)
                continue
            if B[e, B_CIDX] == EMPTY:
                B[e, B_CIDX] = counters[N_CONTRIB]
                counters[N_CONTRIB] += 1
            k = np.int64(B[e, B_CIDX])
            if nv > delta and B[e, B_HAS] != 0.0:
                for r in range(3):
                    for c in range(3):
                        C[r, c] -= Ct[k, 3 * r + c]
            if nv > 1:
                _update_packed(nv, A, a, B, e, z, counters, ws)
            ok = line_endpoint_rays(
                A[a, A_MEAN], A[a, A_MEAN + 1], A[a, A_MEAN + 2],
                B[e, B_P], B[e, B_P + 3], B[e, B_P + 6],
                tau_a, tau_b, centroid, fx, fy, cx, cy, eps_dir, ra, rb,
            )
            if ok:
                for r in range(3):
                    for c in range(3):
                        o = ra[r] * rb[c]
                        Ct[k, 3 * r + c] = o
                        C[r, c] += o
                B[e, B_HAS] = 1.0
            else:
                counters[N_DEGENERATE] += 1
                B[e, B_HAS] = 0.0
    return stop
