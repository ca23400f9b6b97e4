"""Shared test utilities: finite differences and brute-force oracles."""

import itertools

import numpy as np
from scipy.optimize import linprog

from dals.geometry import TriMesh, icosphere


def central_difference(f, x, eps=1e-6):
    """Central differences of scalar ``f`` with respect to every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def brute_nearest_sq(src, dst):
    """Squared distance from each ``src`` point to its nearest ``dst`` point, all pairs."""
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    return ((src[:, None, :] - dst[None, :, :]) ** 2).sum(-1).min(axis=1)


def brute_metrics(p, q, diameter):
    d = np.sqrt(((p[:, None, :] - q[None, :, :]) ** 2).sum(-1))
    dp, dq = d.min(axis=1), d.min(axis=0)

    def f(tau):
        prec = sum(x < tau for x in dp) / len(dp)
        rec = sum(x < tau for x in dq) / len(dq)
        return 0.0 if prec + rec == 0 else 100 * 2 * prec * rec / (prec + rec)

    return {
        "chamfer": np.mean(dp ** 2) + np.mean(dq ** 2),
        "hausdorff": max(dp.max(), dq.max()),
        "f1": f(0.01 * diameter),
        "f2": f(0.02 * diameter),
    }


def brute_udt(mask, spacing):
    """All-pairs distance to the nearest both-sided 6-adjacency boundary voxel."""
    m = mask.astype(bool)
    dims = m.shape
    bnd = np.zeros(dims, dtype=bool)
    for idx in itertools.product(*[range(n) for n in dims]):
        for ax in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[ax] += step
                if 0 <= nb[ax] < dims[ax] and m[tuple(nb)] != m[idx]:
                    bnd[idx] = True
    pts = np.argwhere(bnd) * spacing
    out = np.zeros(dims)
    for idx in itertools.product(*[range(n) for n in dims]):
        out[idx] = np.sqrt(((pts - np.array(idx) * spacing) ** 2).sum(1)).min()
    return out, bnd


def lp_triangles_intersect(t1, t2):
    """Feasibility of ``sum a_i t1_i = sum b_j t2_j`` with a, b in the simplex."""
    a_eq = np.zeros((5, 6))
    a_eq[:3, :3] = t1.T
    a_eq[:3, 3:] = -t2.T
    a_eq[3, :3] = 1
    a_eq[4, 3:] = 1
    b_eq = np.array([0, 0, 0, 1, 1.0])
    res = linprog(np.zeros(6), A_eq=a_eq, b_eq=b_eq, bounds=[(0, None)] * 6, method="highs")
    return res.status == 0


def crumpled_sphere(seed, k=1, amp=0.6):
    m = icosphere(k)
    r = np.random.default_rng(seed)
    return TriMesh(m.vertices + amp * r.normal(size=m.vertices.shape) * 0.3, m.faces)
