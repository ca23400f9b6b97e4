import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dals.decoder import random_rotation
from dals.geometry import TriMesh, icosphere
from dals.metrics import (
    bounding_sphere_diameter,
    eval_pair,
    minimal_enclosing_sphere,
    point_metrics,
    report,
)
from helpers import brute_metrics


@given(st.integers(0, 10_000), st.integers(1, 128), st.integers(1, 128))
def test_point_metrics_match_brute_force(seed, n, m):
    r = np.random.default_rng(seed)
    p = r.normal(size=(n, 3))
    q = p[r.integers(0, n, size=m)] + r.normal(size=(m, 3)) * r.choice([0.001, 0.01, 0.3])
    diameter = float(r.uniform(0.5, 3))
    got = point_metrics(p, q, diameter)
    want = brute_metrics(p, q, diameter)
    for k in want:
        assert got[k] == pytest.approx(want[k], rel=1e-12, abs=1e-15), k
    assert got["f1"] == want["f1"] and got["f2"] == want["f2"]


def test_point_metrics_identical_sets(rng):
    p = rng.normal(size=(50, 3))
    got = point_metrics(p, p.copy(), 1.0)
    assert got == {"chamfer": 0.0, "hausdorff": 0.0, "f1": 100.0, "f2": 100.0}


@given(st.integers(0, 10_000))
def test_f_score_monotone_and_hausdorff_bounds(seed):
    r = np.random.default_rng(seed)
    p, q = r.normal(size=(40, 3)), r.normal(size=(30, 3))
    got = point_metrics(p, q, 2.0)
    assert got["f2"] >= got["f1"]
    d = np.sqrt(((p[:, None] - q[None]) ** 2).sum(-1))
    assert got["hausdorff"] >= d.min(1).max() and got["hausdorff"] >= d.min(0).max()
    assert got["hausdorff"] > 0


# bounding sphere --------------------------------------------------------------

def test_bounding_sphere_examples():
    assert bounding_sphere_diameter(np.array([[1.0, 0, 0], [-1.0, 0, 0]])) == 2.0
    assert abs(bounding_sphere_diameter(icosphere(3)) - 2.0) < 0.002


@given(st.integers(0, 10_000), st.integers(2, 300))
def test_bounding_sphere_classic_bounds(seed, n):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(n, 3)) * r.uniform(0.1, 5, size=3)
    c, rad = minimal_enclosing_sphere(pts)
    assert np.linalg.norm(pts - c, axis=1).max() <= rad * (1 + 1e-9) + 1e-12
    dmax = max(np.linalg.norm(a - b) for a, b in itertools.combinations(pts, 2))
    dia = 2 * rad
    assert dia >= dmax * (1 - 1e-12)
    assert dia <= dmax * 2 / np.sqrt(3) * (1 + 1e-12)


def test_bounding_sphere_minimal_against_optimizer(rng):
    from scipy.optimize import minimize

    pts = rng.normal(size=(60, 3))
    _, rad = minimal_enclosing_sphere(pts)
    res = minimize(lambda c: np.linalg.norm(pts - c, axis=1).max(), pts.mean(0), method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    assert rad <= res.fun + 1e-9
    assert rad >= res.fun * (1 - 1e-3)


# mesh evaluation ----------------------------------------------------------------

def test_eval_pair_identity():
    m = icosphere(2)
    row = eval_pair(m, m, 5000, np.random.default_rng(0))
    assert row["chamfer"] == 0 and row["hausdorff"] == 0
    assert row["f1"] == 100 and row["f2"] == 100
    assert row["self_int_pct"] == 0
    assert 0.9 < row["quality"] <= 1


def test_eval_pair_scaled_sphere():
    gt = icosphere(4)
    pred = TriMesh(gt.vertices * 1.005, gt.faces)
    row = eval_pair(pred, gt, 100_000, np.random.default_rng(0))
    assert row["f1"] == 100.0


def test_eval_pair_rigid_invariance():
    gt = icosphere(2)
    pred = TriMesh(gt.vertices * [1.1, 0.9, 1.0], gt.faces)
    rot = random_rotation(np.random.default_rng(4))
    shift = np.array([3.0, -2.0, 0.5])
    a = eval_pair(pred, gt, 4000, np.random.default_rng(1))
    b = eval_pair(TriMesh(pred.vertices @ rot.T + shift, pred.faces),
                  TriMesh(gt.vertices @ rot.T + shift, gt.faces), 4000, np.random.default_rng(1))
    for k in a:
        assert abs(a[k] - b[k]) <= 1e-9 * max(1.0, abs(a[k])), k


def test_eval_pair_empty_mesh():
    with pytest.raises(ValueError):
        eval_pair(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), icosphere(0))


# reports -----------------------------------------------------------------------

ROW = {"chamfer": 0.0, "hausdorff": 0.1, "f1": 90.0, "f2": 95.0, "quality": 0.8, "self_int_pct": 0.0}


def test_report_single_row_std_zero():
    s = report([ROW]).summary()
    assert all(v["std"] == 0 for v in s.values())


def test_report_population_std():
    rows = [dict(ROW, hausdorff=2.0), dict(ROW, hausdorff=4.0)]
    s = report(rows).summary()
    assert s["hausdorff"] == {"mean": 3.0, "std": 1.0}


def test_report_scales_chamfer_only_at_emission(tmp_path):
    rows = [dict(ROW, chamfer=0.0003, hausdorff=0.123456789), dict(ROW, chamfer=0.0001)]
    rep = report(rows, ["a", "b"])
    assert rep.rows[0]["chamfer"] == 0.0003
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["rows"][0]["chamfer"] == 0.0003 * 1e4
    assert doc["rows"][0]["hausdorff"] == 0.123456789
    assert doc["summary"]["chamfer"]["mean"] == report(rows).summary()["chamfer"]["mean"] * 1e4
    with open(tmp_path / "r.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["name", "chamfer", "hausdorff", "f1", "f2", "quality", "self_int_pct"]
    assert float(table[1][2]) == 0.123456789
    assert [r[0] for r in table[1:]] == ["a", "b", "mean", "std"]


def test_report_requires_rows():
    with pytest.raises(ValueError):
        report([])
