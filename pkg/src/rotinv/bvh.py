"""Bounding volume hierarchy over axis-aligned primitive boxes.

The tree is built in numpy (median split of centroids along the widest
axis); traversal kernels are numba-compiled and parallel over rays. Each
ray's result depends only on that ray, so output is independent of the
thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

if nb.config.THREADING_LAYER == "default":
    # the bundled TBB is too old; omp/workqueue are both deterministic per ray
    nb.config.THREADING_LAYER = "workqueue"

LEAF_SIZE = 4


@dataclass(frozen=True)
class Bvh:
    bmin: np.ndarray  # (n_nodes, 3)
    bmax: np.ndarray
    left: np.ndarray  # child index, -1 for leaves
    right: np.ndarray
    start: np.ndarray  # leaf range into ``order``
    count: np.ndarray
    order: np.ndarray  # primitive permutation

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    @property
    def empty(self) -> bool:
        return len(self.order) == 0

    def leaves(self):
        for i in range(self.n_nodes):
            if self.left[i] < 0:
                yield i, self.order[self.start[i] : self.start[i] + self.count[i]]


def build(prim_min: np.ndarray, prim_max: np.ndarray, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Build a BVH over boxes ``[prim_min[i], prim_max[i]]``. Deterministic."""
    prim_min = np.asarray(prim_min, dtype=np.float64).reshape(-1, 3)
    prim_max = np.asarray(prim_max, dtype=np.float64).reshape(-1, 3)
    n = len(prim_min)
    if n == 0:
        z3 = np.zeros((0, 3))
        zi = np.zeros(0, dtype=np.int64)
        return Bvh(z3, z3, zi, zi, zi, zi, zi)
    centroid = 0.5 * (prim_min + prim_max)
    order = np.arange(n, dtype=np.int64)
    cap = 2 * n
    bmin = np.empty((cap, 3))
    bmax = np.empty((cap, 3))
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    n_nodes = 1
    stack = [(0, 0, n)]
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        bmin[node] = prim_min[idx].min(0)
        bmax[node] = prim_max[idx].max(0)
        if hi - lo <= leaf_size:
            start[node], count[node] = lo, hi - lo
            continue
        c = centroid[idx]
        extent = c.max(0) - c.min(0)
        axis = int(np.argmax(extent))
        if extent[axis] <= 0:
            start[node], count[node] = lo, hi - lo
            continue
        # stable sort keeps construction deterministic for equal centroids
        idx = idx[np.argsort(c[:, axis], kind="stable")]
        order[lo:hi] = idx
        mid = lo + (hi - lo) // 2
        l, r = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = l, r
        stack.append((r, mid, hi))
        stack.append((l, lo, mid))
    return Bvh(bmin[:n_nodes].copy(), bmax[:n_nodes].copy(), left[:n_nodes].copy(), right[:n_nodes].copy(),
               start[:n_nodes].copy(), count[:n_nodes].copy(), order)


def validate(bvh: Bvh, prim_min: np.ndarray, prim_max: np.ndarray) -> None:
    """Raise ``AssertionError`` unless every primitive is in exactly one leaf and boxes nest."""
    n = len(prim_min)
    seen = np.zeros(n, dtype=np.int64)
    for node, prims in bvh.leaves():
        seen[prims] += 1
        assert np.all(prim_min[prims] >= bvh.bmin[node] - 1e-12)
        assert np.all(prim_max[prims] <= bvh.bmax[node] + 1e-12)
    assert np.all(seen == 1), "primitive missing from or duplicated across leaves"
    for i in range(bvh.n_nodes):
        for c in (bvh.left[i], bvh.right[i]):
            if c >= 0:
                assert np.all(bvh.bmin[c] >= bvh.bmin[i] - 1e-12)
                assert np.all(bvh.bmax[c] <= bvh.bmax[i] + 1e-12)


# --------------------------------------------------------------------------
# kernels


@nb.njit(cache=True, inline="always")
def _slab(o0, o1, o2, i0, i1, i2, bmin, bmax, node, tmin, tmax):
    t0 = (bmin[node, 0] - o0) * i0
    t1 = (bmax[node, 0] - o0) * i0
    lo = min(t0, t1)
    hi = max(t0, t1)
    t0 = (bmin[node, 1] - o1) * i1
    t1 = (bmax[node, 1] - o1) * i1
    lo = max(lo, min(t0, t1))
    hi = min(hi, max(t0, t1))
    t0 = (bmin[node, 2] - o2) * i2
    t1 = (bmax[node, 2] - o2) * i2
    lo = max(lo, min(t0, t1))
    hi = min(hi, max(t0, t1))
    lo = max(lo, tmin)
    hi = min(hi, tmax)
    return lo, hi


@nb.njit(cache=True, inline="always")
def _safe_inv(x):
    if abs(x) < 1e-30:
        return 1e30 if x >= 0 else -1e30
    return 1.0 / x


@nb.njit(cache=True, inline="always")
def _moller_trumbore(o, d, v0, v1, v2):
    e1x, e1y, e1z = v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]
    e2x, e2y, e2z = v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]
    px = d[1] * e2z - d[2] * e2y
    py = d[2] * e2x - d[0] * e2z
    pz = d[0] * e2y - d[1] * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-9:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    sx, sy, sz = o[0] - v0[0], o[1] - v0[1], o[2] - v0[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v


@nb.njit(cache=True, parallel=True)
def closest_triangle(orig, dirs, tmin, tmax, verts, tris, bmin, bmax, left, right, start, count, order):
    n = orig.shape[0]
    out_t = np.full(n, np.inf)
    out_tri = np.full(n, -1, dtype=np.int64)
    out_u = np.zeros(n)
    out_v = np.zeros(n)
    if bmin.shape[0] == 0:
        return out_t, out_tri, out_u, out_v
    for r in nb.prange(n):
        o = orig[r]
        d = dirs[r]
        i0 = _safe_inv(d[0])
        i1 = _safe_inv(d[1])
        i2 = _safe_inv(d[2])
        best_t = tmax[r]
        best_tri = -1
        best_u = 0.0
        best_v = 0.0
        stack = np.empty(128, dtype=np.int64)
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            lo, hi = _slab(o[0], o[1], o[2], i0, i1, i2, bmin, bmax, node, tmin[r], best_t)
            if lo > hi:
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    tri = order[j]
                    t, u, v = _moller_trumbore(o, d, verts[tris[tri, 0]], verts[tris[tri, 1]], verts[tris[tri, 2]])
                    if t > tmin[r] and t <= best_t:
                        if t < best_t or best_tri < 0 or tri < best_tri:
                            best_t = t
                            best_tri = tri
                            best_u = u
                            best_v = v
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        if best_tri >= 0:
            out_t[r] = best_t
            out_tri[r] = best_tri
            out_u[r] = best_u
            out_v[r] = best_v
    return out_t, out_tri, out_u, out_v


@nb.njit(cache=True)
def _collect(o, d, i0, i1, i2, tmin, tmax, bmin, bmax, left, right, start, count, order, out, write):
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    m = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        lo, hi = _slab(o[0], o[1], o[2], i0, i1, i2, bmin, bmax, node, tmin, tmax)
        if lo > hi:
            continue
        if left[node] < 0:
            for j in range(start[node], start[node] + count[node]):
                if write:
                    out[m] = order[j]
                m += 1
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return m


@nb.njit(cache=True, parallel=True)
def overlapping_prims(orig, dirs, tmin, tmax, bmin, bmax, left, right, start, count, order):
    """CSR lists of primitives whose boxes the ray segment touches."""
    n = orig.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    if bmin.shape[0] == 0:
        return np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    dummy = np.empty(0, dtype=np.int64)
    for r in nb.prange(n):
        d = dirs[r]
        counts[r] = _collect(orig[r], d, _safe_inv(d[0]), _safe_inv(d[1]), _safe_inv(d[2]), tmin[r], tmax[r],
                             bmin, bmax, left, right, start, count, order, dummy, False)
    offsets = np.zeros(n + 1, dtype=np.int64)
    for r in range(n):
        offsets[r + 1] = offsets[r] + counts[r]
    flat = np.empty(offsets[n], dtype=np.int64)
    for r in nb.prange(n):
        d = dirs[r]
        _collect(orig[r], d, _safe_inv(d[0]), _safe_inv(d[1]), _safe_inv(d[2]), tmin[r], tmax[r],
                 bmin, bmax, left, right, start, count, order, flat[offsets[r]:offsets[r + 1]], True)
    return offsets, flat
