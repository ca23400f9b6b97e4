"""Differentiable objectives: Chamfer, slice Chamfer, triangle quality, UDF fit, Dirichlet.

All losses take vertex positions as a ``diffcore.Tensor`` so gradients flow
back through the decoder to the latent codes.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import diffcore as dc
from .geometry import Plane, plane_mesh_intersection_samples, sample_surface, TriMesh
from .geometry.mesh import _QUALITY_NORM
from .volume import GradientGrid, VoxelGrid, trilinear_values

OUT_OF_GRID_PENALTY = 1.0


def nearest(src: np.ndarray, dst: np.ndarray):
    """Index into ``dst`` of each ``src`` point's nearest neighbour and the squared distance."""
    _, idx = cKDTree(dst).query(src, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    d2 = ((src - dst[idx]) ** 2).sum(axis=1)
    return idx, d2


def chamfer(pred, target: np.ndarray, pred_divisor: float | None = None,
            target_divisor: float | None = None) -> dc.Tensor:
    """Squared-distance Chamfer: mean over ``pred`` plus mean over ``target``.

    The divisors default to the set sizes; the slice loss overrides the target one.
    Gradients reach ``pred`` only.
    """
    pred = dc.as_tensor(pred)
    p = pred.value
    q = np.asarray(target, dtype=np.float64)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("chamfer needs two non-empty point sets")
    n1 = float(len(p) if pred_divisor is None else pred_divisor)
    n2 = float(len(q) if target_divisor is None else target_divisor)
    i_pq, d_pq = nearest(p, q)
    i_qp, d_qp = nearest(q, p)
    value = d_pq.sum() / n1 + d_qp.sum() / n2

    def vjp(g):
        g = float(g)
        grad = 2.0 * (p - q[i_pq]) / n1
        back = 2.0 * (p[i_qp] - q) / n2
        for k in range(3):
            grad[:, k] += np.bincount(i_qp, weights=back[:, k], minlength=len(p))
        return (g * grad,)

    return dc._op("chamfer", np.array(value), (pred,), vjp)


def one_sided_chamfer(source: np.ndarray, pred, divisor: float) -> dc.Tensor:
    """``sum_q min_p |p - q|^2 / divisor`` with gradients to ``pred``."""
    pred = dc.as_tensor(pred)
    p = pred.value
    i_qp, d_qp = nearest(source, p)

    def vjp(g):
        back = 2.0 * (p[i_qp] - source) / divisor
        grad = np.stack([np.bincount(i_qp, weights=back[:, k], minlength=len(p)) for k in range(3)], 1)
        return (float(g) * grad,)

    return dc._op("one_sided_chamfer", np.array(d_qp.sum() / divisor), (pred,), vjp)


def sampled_points(vertices, faces: np.ndarray, samples) -> dc.Tensor:
    """Differentiable sample positions ``W @ vertices`` with frozen barycentrics."""
    vertices = dc.as_tensor(vertices)
    w = samples.weights(faces, len(vertices.value))
    return dc.sparse_matmul(w, vertices)


def surface_chamfer(vertices, faces, target, n_samples, rng) -> dc.Tensor:
    vertices = dc.as_tensor(vertices)
    s = sample_surface(TriMesh(vertices.value, faces), n_samples, rng)
    return chamfer(sampled_points(vertices, faces, s), target)


def slice_chamfer(vertices, faces: np.ndarray, planes, annotations, m: int = 5000,
                  rng: np.random.Generator | None = None, samples=None) -> dc.Tensor:
    """Mean over planes of the Chamfer between mesh slice samples and annotated curve points.

    Both directional sums are divided by ``m``. A plane that misses the mesh
    contributes only the annotation-to-surface term, measured against ``m``
    samples of the whole surface. ``samples`` (one record per plane) replaces
    the random draw, which freezes the linear sample map.
    """
    if not planes:
        raise ValueError("slice_chamfer needs at least one plane")
    if len(planes) != len(annotations):
        raise ValueError("one annotation set per plane is required")
    rng = np.random.default_rng() if rng is None else rng
    vertices = dc.as_tensor(vertices)
    mesh = TriMesh(vertices.value, faces)
    terms = []
    for plane, ann in zip(planes, annotations):
        ann = np.asarray(ann, dtype=np.float64)
        if len(ann) == 0:
            raise ValueError("every plane needs a non-empty annotation set")
        s = plane_mesh_intersection_samples(mesh, plane, m, rng) if samples is None else samples[len(terms)]
        if len(s) == 0:
            surf = sample_surface(mesh, m, rng)
            terms.append(one_sided_chamfer(ann, sampled_points(vertices, faces, surf), float(m)))
        else:
            terms.append(chamfer(sampled_points(vertices, faces, s), ann,
                                 pred_divisor=float(m), target_divisor=float(m)))
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return dc.scale(total, 1.0 / len(terms))


def quality_regularizer(vertices, faces: np.ndarray) -> dc.Tensor:
    """``1 - 4*sqrt(3)/|F| * sum_f A_f / (a_f^2 + b_f^2 + c_f^2)`` with its analytic gradient."""
    vertices = dc.as_tensor(vertices)
    v = vertices.value
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    e1, e2 = b - a, c - a
    n = np.cross(e1, e2)
    nn = np.linalg.norm(n, axis=1)
    area = 0.5 * nn
    s = (e1 ** 2).sum(1) + ((c - b) ** 2).sum(1) + (e2 ** 2).sum(1)
    ok = s > 0
    safe_s = np.where(ok, s, 1.0)
    ratio = np.where(ok, area / safe_s, 0.0)
    nf = len(faces)
    value = 1.0 - _QUALITY_NORM * ratio.sum() / nf

    def vjp(g):
        nhat = n / np.where(nn > 0, nn, 1.0)[:, None]
        nhat[nn == 0] = 0.0
        dA_b = 0.5 * np.cross(e2, nhat)
        dA_c = 0.5 * np.cross(nhat, e1)
        dA_a = -(dA_b + dA_c)
        dS_a = 2.0 * (2 * a - b - c)
        dS_b = 2.0 * (2 * b - a - c)
        dS_c = 2.0 * (2 * c - a - b)
        inv = (1.0 / safe_s)[:, None] * ok[:, None]
        r2 = (area / safe_s ** 2)[:, None] * ok[:, None]
        coef = -float(g) * _QUALITY_NORM / nf
        grad = np.zeros_like(v)
        for k, dA, dS in ((0, dA_a, dS_a), (1, dA_b, dS_b), (2, dA_c, dS_c)):
            d = coef * (dA * inv - dS * r2)
            for ax in range(3):
                grad[:, ax] += np.bincount(faces[:, k], weights=d[:, ax], minlength=len(v))
        return (grad,)

    return dc._op("quality_regularizer", np.array(value), (vertices,), vjp)


def udf_fit_loss(vertices, udf: VoxelGrid, grad: GradientGrid,
                 penalty: float = OUT_OF_GRID_PENALTY) -> dc.Tensor:
    """Mean trilinear UDF at the vertices; the backward pass injects trilinear Sobel gradients.

    Vertices outside the grid are evaluated at their clamped position plus
    ``penalty * distance`` to the grid box, whose gradient points back inside.
    """
    if min(udf.dims) < 2:
        raise ValueError("udf grid needs every dimension >= 2")
    if not (udf.same_geometry(grad.gx) and udf.same_geometry(grad.gy) and udf.same_geometry(grad.gz)):
        raise ValueError("UDF and gradient grids must share geometry")
    vertices = dc.as_tensor(vertices)
    x = vertices.value
    lo, hi = udf.bounds()
    clamped = np.clip(x, lo, hi)
    outside = x - clamped
    dist = np.linalg.norm(outside, axis=1)
    u = trilinear_values(udf.values.astype(np.float64), udf, clamped)
    nv = len(x)
    value = (u.sum() + penalty * dist.sum()) / nv

    def vjp(g):
        # clamped axes see only the penalty term
        gr = trilinear_values(grad.stacked(), udf, clamped) * (outside == 0)
        dirn = outside / np.where(dist > 0, dist, 1.0)[:, None]
        return (float(g) * (gr + penalty * dirn) / nv,)

    return dc._op("udf_fit_loss", np.array(value), (vertices,), vjp)


def latent_norm_penalty(z) -> dc.Tensor:
    return dc.squared_norm(z)


# Dirichlet energy on latent fields (not taped; applied as a smoothing step) ----

def _power_apply(lap: sp.spmatrix, z: np.ndarray, p: int) -> np.ndarray:
    out = z
    for _ in range(p):
        out = lap @ out
    return np.asarray(out)


def dirichlet_energy(Z: np.ndarray, lap: sp.spmatrix, p: int = 2) -> float:
    """``Tr(Z^T L^p Z)`` using repeated sparse products."""
    Z = np.asarray(Z, dtype=np.float64)
    if p < 1:
        raise ValueError("p must be >= 1")
    if lap.shape[0] != Z.shape[0]:
        raise ValueError("Laplacian size does not match the latent rows")
    return float(np.sum(Z * _power_apply(lap, Z, p)))


def smoothing_step_bound(p: int) -> float:
    """Largest step keeping ``I - step * L^p`` non-expansive for the row-normalized L (spectrum in [0, 2])."""
    return 1.0 / 2.0 ** p


def laplacian_smooth_step(Z: np.ndarray, lap: sp.spmatrix, p: int = 2, step: float = 0.1) -> np.ndarray:
    """``Z - step * L^p Z``; with the row-normalized Laplacian this is ``p`` rounds of umbrella smoothing."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if lap.shape[0] != Z.shape[0]:
        raise ValueError("Laplacian size does not match the latent rows")
    return Z - step * _power_apply(lap, Z, p)


def degree_weighted_energy(Z: np.ndarray, lap: sp.spmatrix, degrees: np.ndarray, p: int = 2) -> float:
    """``Tr(Z^T D L^p Z)`` for the row-normalized ``L``.

    ``D L`` is symmetric, so this is the energy that the smoothing step
    provably never increases for steps within the stability bound.
    """
    Z = np.asarray(Z, dtype=np.float64)
    return float(np.sum(Z * (np.asarray(degrees)[:, None] * _power_apply(lap, Z, p))))
