"""Surface reconstruction metrics and cohort reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import TriMesh, sample_surface, self_intersection_fraction, triangle_quality_loss

DEFAULT_EVAL_SAMPLES = 100_000
CHAMFER_REPORT_SCALE = 1e4
COLUMNS = ("chamfer", "hausdorff", "f1", "f2", "quality", "self_int_pct")


# minimal enclosing sphere -------------------------------------------------

def _sphere_through(boundary):
    """Smallest sphere with every point of ``boundary`` (1 to 4 points) on its surface."""
    p0 = boundary[0]
    if len(boundary) == 1:
        return p0.copy(), 0.0
    a = np.array([p - p0 for p in boundary[1:]])
    rhs = 0.5 * (a * a).sum(axis=1)
    lam, *_ = np.linalg.lstsq(a @ a.T, rhs, rcond=None)
    c = p0 + lam @ a
    r = max(float(np.linalg.norm(p - c)) for p in boundary)
    return c, r


def _welzl(pts: np.ndarray, boundary: list, tol: float):
    if len(boundary) == 4 or len(pts) == 0:
        return _sphere_through(boundary) if boundary else (pts[0].copy(), 0.0)
    if boundary:
        c, r = _sphere_through(boundary)
        start = 0
    else:
        c, r = pts[0].copy(), 0.0
        start = 1
    i = start
    while i < len(pts):
        d = np.linalg.norm(pts[i:] - c, axis=1)
        out = np.flatnonzero(d > r + tol)
        if len(out) == 0:
            break
        j = i + int(out[0])
        c, r = _welzl(pts[:j], boundary + [pts[j]], tol)
        i = j + 1
    return c, r


def minimal_enclosing_sphere(points, seed: int = 0):
    """Welzl's move-to-front algorithm with vectorized violation scans.

    Points are shuffled with a fixed seed; the tolerance is relative to the
    cloud extent so the result is exact up to round-off.
    """
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 3), axis=0)
    if len(pts) == 0:
        raise ValueError("cannot bound an empty point set")
    pts = pts[np.random.default_rng(seed).permutation(len(pts))]
    tol = 1e-12 * max(1.0, float(np.abs(pts).max()))
    return _welzl(pts, [], tol)


def bounding_sphere_diameter(mesh_or_points) -> float:
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriMesh) else mesh_or_points
    _, r = minimal_enclosing_sphere(pts)
    return 2.0 * r


# pairwise metrics ------------------------------------------------------

def _f_score(d_pred, d_gt, tau):
    precision = float(np.mean(d_pred < tau))
    recall = float(np.mean(d_gt < tau))
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def point_metrics(pred: np.ndarray, gt: np.ndarray, diameter: float) -> dict:
    """Chamfer, Hausdorff and F@1%/F@2% between two point sets.

    ``diameter`` sets the F-score thresholds. Chamfer is the sum of the two
    mean squared nearest-neighbour distances and is returned unscaled.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("metrics need non-empty point sets")
    d_pred, _ = cKDTree(gt).query(pred, k=1)
    d_gt, _ = cKDTree(pred).query(gt, k=1)
    return {
        "chamfer": float(np.mean(d_pred ** 2) + np.mean(d_gt ** 2)),
        "hausdorff": float(max(d_pred.max(), d_gt.max())),
        "f1": _f_score(d_pred, d_gt, 0.01 * diameter),
        "f2": _f_score(d_pred, d_gt, 0.02 * diameter),
    }


def eval_pair(pred: TriMesh, gt: TriMesh, n_samples: int = DEFAULT_EVAL_SAMPLES,
              rng: np.random.Generator | None = None) -> dict:
    """One report row. Both surfaces are sampled with identically seeded generators."""
    if pred.n_faces == 0 or gt.n_faces == 0:
        raise ValueError("cannot evaluate an empty mesh")
    rng = np.random.default_rng(0) if rng is None else rng
    seed = int(rng.integers(0, 2 ** 63 - 1))
    ps = sample_surface(pred, n_samples, np.random.default_rng(seed)).points
    gs = sample_surface(gt, n_samples, np.random.default_rng(seed)).points
    row = point_metrics(ps, gs, bounding_sphere_diameter(gt))
    row["quality"] = 1.0 - triangle_quality_loss(pred)
    row["self_int_pct"] = 100.0 * self_intersection_fraction(pred)
    return row


# reports ---------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-shape rows with population mean and std per column.

    Rows hold raw values; chamfer is multiplied by ``CHAMFER_REPORT_SCALE``
    only when the report is written out.
    """
    rows: list
    names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.rows:
            raise ValueError("a report needs at least one row")
        if not self.names:
            self.names = [f"shape_{i:03d}" for i in range(len(self.rows))]

    @property
    def columns(self) -> list:
        cols = [c for c in COLUMNS if c in self.rows[0]]
        return cols + [c for c in self.rows[0] if c not in cols]

    def summary(self) -> dict:
        out = {}
        for c in self.columns:
            vals = np.array([r[c] for r in self.rows], dtype=np.float64)
            out[c] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
        return out

    def emitted_rows(self) -> list:
        return [{c: _emit(c, r[c]) for c in self.columns} for r in self.rows]

    def emitted_summary(self) -> dict:
        return {c: {k: _emit(c, v) for k, v in s.items()} for c, s in self.summary().items()}

    def to_json(self, path) -> None:
        doc = {
            "std": "population (divisor N)",
            "chamfer_scale": CHAMFER_REPORT_SCALE,
            "rows": [dict(name=n, **r) for n, r in zip(self.names, self.emitted_rows())],
            "summary": self.emitted_summary(),
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)

    def to_csv(self, path) -> None:
        cols = self.columns
        summary = self.emitted_summary()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name"] + cols)
            for n, r in zip(self.names, self.emitted_rows()):
                w.writerow([n] + [repr(r[c]) for c in cols])
            w.writerow(["mean"] + [repr(summary[c]["mean"]) for c in cols])
            w.writerow(["std"] + [repr(summary[c]["std"]) for c in cols])


def _emit(column, value):
    return value * CHAMFER_REPORT_SCALE if column == "chamfer" else value


def report(rows, names=None) -> EvalReport:
    return EvalReport(list(rows), list(names or []))
