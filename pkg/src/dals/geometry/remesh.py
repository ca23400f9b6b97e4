"""Isotropic remeshing for closed manifold triangle meshes.

Each iteration splits long edges, collapses short ones, flips edges to pull
vertex valences toward 6 and finally relaxes vertices tangentially before
projecting them back onto the input surface.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .mesh import MeshError, TriMesh

SPLIT_RATIO = 4.0 / 3.0
COLLAPSE_RATIO = 4.0 / 5.0
_PROJECTION_CANDIDATES = 16


def _key(a, b):
    return (a, b) if a < b else (b, a)


class _EditableMesh:
    def __init__(self, mesh: TriMesh):
        self.pos = [p for p in mesh.vertices.copy()]
        self.faces: list = []
        self.edge_faces: dict = {}
        self.vert_faces = [set() for _ in range(mesh.n_vertices)]
        self.alive = [True] * mesh.n_vertices
        for tri in mesh.faces.tolist():
            self.add_face(tri)
        for faces in self.edge_faces.values():
            if len(faces) != 2:
                raise MeshError("remeshing requires a closed edge-manifold mesh")

    # bookkeeping -------------------------------------------------------
    def add_face(self, tri):
        fi = len(self.faces)
        self.faces.append(list(tri))
        for k in range(3):
            self.edge_faces.setdefault(_key(tri[k], tri[(k + 1) % 3]), []).append(fi)
            self.vert_faces[tri[k]].add(fi)
        return fi

    def remove_face(self, fi):
        tri = self.faces[fi]
        for k in range(3):
            key = _key(tri[k], tri[(k + 1) % 3])
            lst = self.edge_faces[key]
            lst.remove(fi)
            if not lst:
                del self.edge_faces[key]
            self.vert_faces[tri[k]].discard(fi)
        self.faces[fi] = None

    def add_vertex(self, p):
        self.pos.append(np.asarray(p, dtype=np.float64))
        self.vert_faces.append(set())
        self.alive.append(True)
        return len(self.pos) - 1

    def neighbors(self, v):
        out = set()
        for fi in self.vert_faces[v]:
            out.update(self.faces[fi])
        out.discard(v)
        return out

    def valence(self, v):
        return len(self.vert_faces[v])

    def length(self, a, b):
        return float(np.linalg.norm(self.pos[a] - self.pos[b]))

    def wing(self, a, b):
        """(face with a->b, its apex c, face with b->a, its apex d)."""
        f1 = f2 = c = d = None
        for fi in self.edge_faces[_key(a, b)]:
            tri = self.faces[fi]
            i = tri.index(a)
            if tri[(i + 1) % 3] == b:
                f1, c = fi, tri[(i + 2) % 3]
            else:
                f2, d = fi, tri[(i + 1) % 3]
        return f1, c, f2, d

    def normal(self, tri, override=None):
        p = [override.get(v, self.pos[v]) if override else self.pos[v] for v in tri]
        return np.cross(p[1] - p[0], p[2] - p[0])

    # operators ---------------------------------------------------------
    def split(self, a, b):
        f1, c, f2, d = self.wing(a, b)
        m = self.add_vertex(0.5 * (self.pos[a] + self.pos[b]))
        self.remove_face(f1)
        self.remove_face(f2)
        self.add_face((a, m, c))
        self.add_face((m, b, c))
        self.add_face((b, m, d))
        self.add_face((m, a, d))

    def try_collapse(self, a, b, high):
        f1, c, f2, d = self.wing(a, b)
        if c == d or self.neighbors(a) & self.neighbors(b) != {c, d}:
            return False
        if self.valence(c) <= 3 or self.valence(d) <= 3:
            return False
        if sum(self.alive) <= 4:
            return False
        mid = 0.5 * (self.pos[a] + self.pos[b])
        ring = (self.neighbors(a) | self.neighbors(b)) - {a, b}
        if any(np.linalg.norm(mid - self.pos[v]) > high for v in ring):
            return False
        touched = (self.vert_faces[a] | self.vert_faces[b]) - {f1, f2}
        override = {a: mid, b: mid}
        for fi in touched:
            tri = self.faces[fi]
            before = self.normal(tri)
            after = self.normal(tri, override)
            if np.dot(before, after) <= 0 or np.linalg.norm(after) < 1e-12 * max(high * high, 1e-300):
                return False
        self.remove_face(f1)
        self.remove_face(f2)
        for fi in list(self.vert_faces[b]):
            tri = [a if v == b else v for v in self.faces[fi]]
            self.remove_face(fi)
            self.add_face(tri)
        self.pos[a] = mid
        self.alive[b] = False
        return True

    def try_flip(self, a, b):
        f1, c, f2, d = self.wing(a, b)
        if c == d or _key(c, d) in self.edge_faces:
            return False
        va, vb, vc, vd = (self.valence(v) for v in (a, b, c, d))
        if va <= 3 or vb <= 3:
            return False
        before = (va - 6) ** 2 + (vb - 6) ** 2 + (vc - 6) ** 2 + (vd - 6) ** 2
        after = (va - 7) ** 2 + (vb - 7) ** 2 + (vc - 5) ** 2 + (vd - 5) ** 2
        if after >= before:
            return False
        n_old = self.normal(self.faces[f1]) + self.normal(self.faces[f2])
        for tri in ((a, d, c), (b, c, d)):
            if np.dot(self.normal(tri), n_old) <= 0:
                return False
        self.remove_face(f1)
        self.remove_face(f2)
        self.add_face((a, d, c))
        self.add_face((b, c, d))
        return True

    def to_mesh(self) -> TriMesh:
        live = [i for i, ok in enumerate(self.alive) if ok]
        remap = -np.ones(len(self.pos), dtype=np.int64)
        remap[live] = np.arange(len(live))
        faces = np.array([f for f in self.faces if f is not None], dtype=np.int64)
        return TriMesh(np.array([self.pos[i] for i in live]), remap[faces])


def closest_points_on_triangles(p, a, b, c):
    """Closest point to each ``p[i]`` on triangle ``(a[i], b[i], c[i])`` (Ericson's region test)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        m = mask & ~done
        out[m] = value[m]
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = va + vb + vc
        denom = np.where(denom == 0, 1.0, denom)
        v = vb / denom
        w = vc / denom
        assign(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


class SurfaceProjector:
    """Approximate closest-point projection onto a fixed triangle mesh."""

    def __init__(self, mesh: TriMesh, candidates: int = _PROJECTION_CANDIDATES):
        self.tri = mesh.vertices[mesh.faces]
        self.tree = cKDTree(self.tri.mean(axis=1))
        self.k = min(candidates, mesh.n_faces)

    def project(self, points: np.ndarray) -> np.ndarray:
        _, idx = self.tree.query(points, k=self.k)
        idx = np.asarray(idx).reshape(len(points), -1)
        n, k = idx.shape
        rep = np.repeat(points, k, axis=0)
        t = self.tri[idx.reshape(-1)]
        cand = closest_points_on_triangles(rep, t[:, 0], t[:, 1], t[:, 2]).reshape(n, k, 3)
        dist = ((cand - points[:, None]) ** 2).sum(-1)
        return cand[np.arange(n), dist.argmin(axis=1)]


def _vertex_normals(v, f):
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    vn = np.zeros_like(v)
    for k in range(3):
        np.add.at(vn, f[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(norm > 0, norm, 1.0)


def tangential_relaxation(mesh: TriMesh, projector: SurfaceProjector | None = None) -> TriMesh:
    v, f = mesh.vertices, mesh.faces
    e = mesh.edges()
    n = len(v)
    acc = np.zeros_like(v)
    deg = np.bincount(e.ravel(), minlength=n).astype(np.float64)
    np.add.at(acc, e[:, 0], v[e[:, 1]])
    np.add.at(acc, e[:, 1], v[e[:, 0]])
    centroid = acc / np.maximum(deg, 1)[:, None]
    normals = _vertex_normals(v, f)
    delta = centroid - v
    delta -= np.einsum("ij,ij->i", delta, normals)[:, None] * normals
    out = v + delta
    if projector is not None:
        out = projector.project(out)
    return TriMesh(out, f.copy())


def isotropic_remesh(mesh: TriMesh, target_edge_length: float | None = None,
                     iterations: int = 5) -> TriMesh:
    """Remesh toward uniform edge length ``target_edge_length`` (default: current mean)."""
    if iterations <= 0:
        return mesh.copy()
    if target_edge_length is None:
        target_edge_length = float(mesh.edge_lengths().mean())
    if not target_edge_length > 0:
        raise ValueError("target_edge_length must be positive")
    high = SPLIT_RATIO * target_edge_length
    low = COLLAPSE_RATIO * target_edge_length
    projector = SurfaceProjector(mesh)
    current = mesh.copy()
    for _ in range(iterations):
        em = _EditableMesh(current)
        _split_long_edges(em, high)
        _collapse_short_edges(em, low, high)
        _flip_edges(em)
        current = tangential_relaxation(em.to_mesh(), projector)
    return current


def _split_long_edges(em: _EditableMesh, high: float):
    changed = True
    while changed:
        changed = False
        long_edges = [(em.length(a, b), a, b) for (a, b) in em.edge_faces]
        long_edges = sorted((t for t in long_edges if t[0] > high), reverse=True)
        for _, a, b in long_edges:
            if _key(a, b) in em.edge_faces and em.length(a, b) > high:
                em.split(a, b)
                changed = True


def _collapse_short_edges(em: _EditableMesh, low: float, high: float):
    short = sorted((em.length(a, b), a, b) for (a, b) in em.edge_faces)
    for _, a, b in short:
        if not (em.alive[a] and em.alive[b]) or _key(a, b) not in em.edge_faces:
            continue
        if em.length(a, b) < low:
            em.try_collapse(a, b, high)


def _flip_edges(em: _EditableMesh):
    for a, b in list(em.edge_faces):
        if _key(a, b) in em.edge_faces:
            em.try_flip(a, b)
