"""Self-intersection detection: AABB tree for culling, vectorized triangle tests."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh

_LEAF_SIZE = 8


class AABBTree:
    """Median-split bounding volume hierarchy over triangle bounding boxes."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray, leaf_size: int = _LEAF_SIZE):
        self.lo_items, self.hi_items = lo, hi
        self.order = np.arange(len(lo))
        self.node_lo, self.node_hi = [], []
        self.children = []  # (left, right) or None for leaves
        self.ranges = []
        self.leaf_size = leaf_size
        if len(lo):
            self._build(0, len(lo))

    def _build(self, start, stop):
        idx = self.order[start:stop]
        node = len(self.node_lo)
        self.node_lo.append(self.lo_items[idx].min(axis=0))
        self.node_hi.append(self.hi_items[idx].max(axis=0))
        self.ranges.append((start, stop))
        self.children.append(None)
        if stop - start > self.leaf_size:
            centers = 0.5 * (self.lo_items[idx] + self.hi_items[idx])
            axis = int(np.argmax(self.node_hi[node] - self.node_lo[node]))
            mid = (stop - start) // 2
            part = np.argsort(centers[:, axis], kind="stable")
            self.order[start:stop] = idx[part]
            left = self._build(start, start + mid)
            right = self._build(start + mid, stop)
            self.children[node] = (left, right)
        return node

    def _overlap(self, a, b):
        return bool(np.all(self.node_lo[a] <= self.node_hi[b]) and np.all(self.node_lo[b] <= self.node_hi[a]))

    def self_pairs(self) -> np.ndarray:
        """All item pairs (i < j) whose leaf boxes overlap; a superset of overlapping items."""
        if not self.node_lo:
            return np.zeros((0, 2), dtype=np.int64)
        out = []
        stack = [(0, 0)]
        while stack:
            a, b = stack.pop()
            ca, cb = self.children[a], self.children[b]
            if a == b:
                if ca is None:
                    out.append(self._leaf_pairs(a, a))
                else:
                    l, r = ca
                    stack += [(l, l), (r, r), (l, r)]
                continue
            if not self._overlap(a, b):
                continue
            if ca is None and cb is None:
                out.append(self._leaf_pairs(a, b))
            elif cb is None or (ca is not None and
                                self.ranges[a][1] - self.ranges[a][0] >= self.ranges[b][1] - self.ranges[b][0]):
                stack += [(ca[0], b), (ca[1], b)]
            else:
                stack += [(a, cb[0]), (a, cb[1])]
        pairs = np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)
        return pairs

    def _leaf_pairs(self, a, b):
        ia = self.order[slice(*self.ranges[a])]
        ib = self.order[slice(*self.ranges[b])]
        i, j = np.meshgrid(ia, ib, indexing="ij")
        p = np.stack([i.ravel(), j.ravel()], axis=1)
        p = np.sort(p, axis=1)
        return p[p[:, 0] < p[:, 1]]


def _segment_hits_triangle(p0, p1, a, b, c, n):
    """Closed segment vs closed triangle, non-coplanar configurations only."""
    s0 = np.einsum("ij,ij->i", p0 - a, n)
    s1 = np.einsum("ij,ij->i", p1 - a, n)
    straddle = (s0 * s1 <= 0) & ~((s0 == 0) & (s1 == 0))
    denom = np.where(straddle, s0 - s1, 1.0)
    t = np.where(straddle, s0 / denom, 0.0)
    x = p0 + t[:, None] * (p1 - p0)
    e0 = np.einsum("ij,ij->i", np.cross(b - a, x - a), n)
    e1 = np.einsum("ij,ij->i", np.cross(c - b, x - b), n)
    e2 = np.einsum("ij,ij->i", np.cross(a - c, x - c), n)
    inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    return straddle & inside


def _coplanar_overlap(t1, t2) -> bool:
    n = np.cross(t1[1] - t1[0], t1[2] - t1[0])
    drop = int(np.argmax(np.abs(n)))
    keep = [k for k in range(3) if k != drop]
    p, q = t1[:, keep], t2[:, keep]

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_segment(a, b, x):
        return min(a[0], b[0]) <= x[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= x[1] <= max(a[1], b[1])

    def seg_cross(a, b, c, d):
        d1, d2 = orient(c, d, a), orient(c, d, b)
        d3, d4 = orient(a, b, c), orient(a, b, d)
        if d1 * d2 < 0 and d3 * d4 < 0:
            return True
        return ((d1 == 0 and on_segment(c, d, a)) or (d2 == 0 and on_segment(c, d, b))
                or (d3 == 0 and on_segment(a, b, c)) or (d4 == 0 and on_segment(a, b, d)))

    def contains(tri, x):
        s = [orient(tri[k], tri[(k + 1) % 3], x) for k in range(3)]
        return all(v >= 0 for v in s) or all(v <= 0 for v in s)

    for i in range(3):
        for j in range(3):
            if seg_cross(p[i], p[(i + 1) % 3], q[j], q[(j + 1) % 3]):
                return True
    return contains(p, q[0]) or contains(q, p[0])


def triangle_pairs_intersect(vertices: np.ndarray, faces: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Boolean per pair: do the two (vertex-disjoint) triangles intersect?"""
    if len(pairs) == 0:
        return np.zeros(0, dtype=bool)
    t1 = vertices[faces[pairs[:, 0]]]
    t2 = vertices[faces[pairs[:, 1]]]
    n1 = np.cross(t1[:, 1] - t1[:, 0], t1[:, 2] - t1[:, 0])
    n2 = np.cross(t2[:, 1] - t2[:, 0], t2[:, 2] - t2[:, 0])
    d2 = np.einsum("pkd,pd->pk", t2 - t1[:, :1], n1)  # t2 vertices vs plane of t1
    d1 = np.einsum("pkd,pd->pk", t1 - t2[:, :1], n2)
    separated = np.all(d2 > 0, axis=1) | np.all(d2 < 0, axis=1) | np.all(d1 > 0, axis=1) | np.all(d1 < 0, axis=1)
    coplanar = np.all(d2 == 0, axis=1)
    hit = np.zeros(len(pairs), dtype=bool)
    live = ~separated & ~coplanar
    if np.any(live):
        a1, b1, c1 = t1[live, 0], t1[live, 1], t1[live, 2]
        a2, b2, c2 = t2[live, 0], t2[live, 1], t2[live, 2]
        m1, m2 = n1[live], n2[live]
        h = np.zeros(int(live.sum()), dtype=bool)
        for p0, p1 in ((a1, b1), (b1, c1), (c1, a1)):
            h |= _segment_hits_triangle(p0, p1, a2, b2, c2, m2)
        for p0, p1 in ((a2, b2), (b2, c2), (c2, a2)):
            h |= _segment_hits_triangle(p0, p1, a1, b1, c1, m1)
        hit[live] = h
    for k in np.flatnonzero(coplanar & ~separated):
        hit[k] = _coplanar_overlap(t1[k], t2[k])
    return hit


def _disjoint_pairs(faces, pairs):
    f1, f2 = faces[pairs[:, 0]], faces[pairs[:, 1]]
    shared = (f1[:, :, None] == f2[:, None, :]).any(axis=(1, 2))
    return pairs[~shared]


def intersecting_faces(mesh: TriMesh) -> np.ndarray:
    """Boolean mask of faces that intersect some face they share no vertex with."""
    v, f = mesh.vertices, mesh.faces
    flags = np.zeros(len(f), dtype=bool)
    if len(f) < 2:
        return flags
    tri = v[f]
    lo, hi = tri.min(axis=1), tri.max(axis=1)
    pairs = AABBTree(lo, hi).self_pairs()
    if len(pairs) == 0:
        return flags
    pairs = np.unique(pairs, axis=0)
    box = np.all(lo[pairs[:, 0]] <= hi[pairs[:, 1]], axis=1) & np.all(lo[pairs[:, 1]] <= hi[pairs[:, 0]], axis=1)
    pairs = _disjoint_pairs(f, pairs[box])
    hit = triangle_pairs_intersect(v, f, pairs)
    flags[pairs[hit, 0]] = True
    flags[pairs[hit, 1]] = True
    return flags


def self_intersection_fraction(mesh: TriMesh) -> float:
    if mesh.n_faces == 0:
        return 0.0
    return float(intersecting_faces(mesh).mean())
