import math

import numpy as np
import pytest

from dals import diffcore as dc
from dals import fitting
from dals.decoder import Checkpoint, DecoderParams, deform_vertices
from dals.fitting import (
    PLANES_DEFAULTS,
    POINTS_DEFAULTS,
    VOLUME_DEFAULTS,
    FitConfig,
    FitError,
    PointsTask,
    annotate_planes,
    fit,
    fit_to_planes,
    fit_to_points,
    init_latents,
    refine_segmentation,
    standard_planes,
)
from dals.geometry import Plane, TriMesh, icosphere, normalize_shape, sample_surface
from dals.losses import chamfer, degree_weighted_energy
from dals.metrics import eval_pair
from dals.synthetic import corpus_from_meshes
from dals.training import TrainConfig, evaluate_training_fit, train
from dals.volume import dice, voxelize

QUICK = {"steps": 150, "template_subdivision": 2, "remesh": False}


def ellipsoid(axes):
    base = icosphere(3)
    return TriMesh(base.vertices * axes, base.faces)


@pytest.fixture(scope="module")
def corpus():
    meshes = [ellipsoid(a) for a in ([1, .6, .5], [.5, 1, .7], [.8, .8, .4])]
    return corpus_from_meshes(["e0", "e1", "e2"], meshes, 500, np.random.default_rng(0))


@pytest.fixture(scope="module")
def ckpt(corpus):
    cfg = TrainConfig(latent_dim=8, hidden=(32, 32, 16), n_points=500, subdivision=2, epochs=800)
    return train(corpus, cfg)[0]


# configuration -------------------------------------------------------------

def test_per_task_defaults():
    assert POINTS_DEFAULTS == {"lambda_reg": 0.001, "lambda_dir": 0.2}
    assert PLANES_DEFAULTS == {"lambda_reg": 0.01, "lambda_dir": 100.0}
    assert VOLUME_DEFAULTS["lambda_reg"] == 0 and math.isinf(VOLUME_DEFAULTS["lambda_dir"])
    assert FitConfig(**VOLUME_DEFAULTS).is_global
    c = FitConfig()
    assert (c.p, c.steps, c.lr, c.remesh_iterations, c.remesh) == (2, 800, 0.002, 5, True)


def test_fit_config_validation():
    for bad in ({"lambda_reg": -1}, {"lambda_dir": -0.1}, {"steps": 0}, {"mode": "both"}, {"p": 0}):
        with pytest.raises(ValueError):
            FitConfig(**bad)
    assert FitConfig(lambda_dir=100, lr=0.002).smoothing_step() == pytest.approx(0.2)
    assert FitConfig(lambda_dir=1000, lr=0.002).smoothing_step() == 0.25
    assert FitConfig(lambda_dir=0.2, lr=0.002).smoothing_step() == pytest.approx(0.0004)


def test_wrappers_apply_defaults(monkeypatch, ckpt):
    seen = []
    monkeypatch.setattr(fitting, "fit", lambda c, task, config: seen.append(config))
    pts = np.random.default_rng(0).normal(size=(50, 3))
    fit_to_points(ckpt, pts)
    fit_to_planes(ckpt, [Plane([0, 0, 1], 0)], [pts], {"steps": 3})
    assert (seen[0].lambda_reg, seen[0].lambda_dir, seen[0].mode) == (0.001, 0.2, "local")
    assert (seen[1].lambda_reg, seen[1].lambda_dir, seen[1].steps) == (0.01, 100.0, 3)


# initialization --------------------------------------------------------------

def test_single_shape_checkpoint_inits_to_its_latent():
    params = DecoderParams.init(4, (8, 8, 4), np.random.default_rng(0))
    params.arrays["Wout"] = np.random.default_rng(1).normal(size=params.arrays["Wout"].shape) * 0.1
    lat = np.random.default_rng(2).normal(size=(1, 4))
    ck = Checkpoint(params, lat, 1, ["only"])
    task = PointsTask(np.random.default_rng(3).normal(size=(40, 3)), 100)
    row, _ = init_latents(ck, task, FitConfig(template_subdivision=1))
    assert np.array_equal(row, lat)
    res = fit(ck, task, FitConfig(template_subdivision=1, steps=1, lambda_dir=0.0, remesh=False, lr=1e-300))
    assert res.latents.shape == (icosphere(1).n_vertices, 4)


def test_candidate_init_no_worse_than_mean(ckpt):
    held = normalize_shape(ellipsoid([.7, .9, .5]))[0]
    pts = sample_surface(held, 500, np.random.default_rng(4)).points
    task = PointsTask(pts, 500)
    cfg = FitConfig(**QUICK)
    template = icosphere(2)
    row, idx = init_latents(ckpt, task, cfg, template)

    def score(z):
        v = deform_vertices(ckpt.params.constants(), dc.Tensor(z), template.vertices)
        return float(task.loss(v, template.faces, np.random.default_rng([cfg.seed, fitting.INIT_STREAM])).value)

    assert score(row) <= score(ckpt.latents.mean(axis=0, keepdims=True))
    assert score(row) == min([score(ckpt.latents.mean(0, keepdims=True))] + [score(ckpt.latents[i:i + 1]) for i in range(3)])
    assert idx in (-1, 0, 1, 2)


# core fitting ------------------------------------------------------------------

def test_decoder_weights_untouched(ckpt, corpus):
    before = {k: v.copy() for k, v in ckpt.params.arrays.items()}
    fit(ckpt, PointsTask(corpus.points[0], 500), FitConfig(**dict(QUICK, steps=10)))
    assert all(np.array_equal(before[k], ckpt.params.arrays[k]) for k in before)


def test_global_rows_identical_and_single_vector_equivalence(ckpt, corpus):
    task = PointsTask(corpus.points[1], 500)
    cfg = FitConfig(**dict(QUICK, steps=20, mode="global", lambda_reg=0.01))
    res = fit(ckpt, task, cfg)
    assert np.all(res.latents == res.latents[0])
    assert res.raw_mesh.n_vertices == icosphere(2).n_vertices

    # an independent single-vector loop
    template = icosphere(2)
    w = ckpt.params.constants()
    z, _ = init_latents(ckpt, task, cfg, template)
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    for t in range(cfg.steps):
        tape = dc.Tape()
        zt = tape.watch(z)
        verts = deform_vertices(w, zt, template.vertices)
        loss = dc.add(task.loss(verts, template.faces, np.random.default_rng([cfg.seed, t])),
                      dc.scale(fitting.quality_regularizer(verts, template.faces), cfg.lambda_reg))
        g = dc.backward(tape, loss)[zt]
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** (t + 1))
        vhat = v / (1 - cfg.beta2 ** (t + 1))
        z = z - cfg.lr * mhat / (np.sqrt(vhat) + 1e-8)
    assert np.allclose(res.latents[0], z[0], rtol=0, atol=1e-12)
    direct = deform_vertices(w, dc.Tensor(z), template.vertices).value
    assert np.allclose(res.raw_mesh.vertices, direct, atol=1e-12)


def test_local_fit_deterministic(ckpt, corpus):
    task = PointsTask(corpus.points[2], 500)
    a = fit(ckpt, task, FitConfig(**dict(QUICK, steps=15)))
    b = fit(ckpt, task, FitConfig(**dict(QUICK, steps=15)))
    assert np.array_equal(a.latents, b.latents)
    assert a.trace == b.trace


def test_smoothing_energy_monotone_every_step(monkeypatch, ckpt, corpus):
    energies = []
    real = fitting.laplacian_smooth_step

    def spy(Z, lap, p, step):
        out = real(Z, lap, p, step)
        deg = np.diff(lap.indptr) - 1
        energies.append((degree_weighted_energy(Z, lap, deg, p), degree_weighted_energy(out, lap, deg, p)))
        return out

    monkeypatch.setattr(fitting, "laplacian_smooth_step", spy)
    fit(ckpt, PointsTask(corpus.points[0], 500), FitConfig(**dict(QUICK, steps=30, lambda_dir=100.0, debug=True)))
    assert len(energies) == 30
    assert all(after <= before for before, after in energies)
    assert sum(after < before for before, after in energies) >= 29


def test_debug_mode_flags_energy_increase(monkeypatch, ckpt, corpus):
    monkeypatch.setattr(fitting, "laplacian_smooth_step", lambda Z, lap, p, step: Z * 2.0)
    with pytest.raises(FitError, match="energy"):
        fit(ckpt, PointsTask(corpus.points[0], 500), FitConfig(**dict(QUICK, steps=3, debug=True)))


def test_refits_training_shape(ckpt, corpus):
    baseline = evaluate_training_fit(ckpt, corpus)
    for i, pts in enumerate(corpus.points):
        res = fit(ckpt, PointsTask(pts, 500), FitConfig(**QUICK))
        s = sample_surface(res.raw_mesh, 500, np.random.default_rng([12345, i]))
        assert float(chamfer(s.points, pts).value) <= 2 * baseline[i]


def test_dimension_mismatch(ckpt, corpus):
    bad = Checkpoint(ckpt.params, np.zeros((3, ckpt.latent_dim + 1)), 2, ["a", "b", "c"])
    with pytest.raises(FitError, match="dimension"):
        fit(bad, PointsTask(corpus.points[0], 500), FitConfig(**QUICK))
    with pytest.raises(ValueError):
        PointsTask(np.zeros((5, 2)))


def test_nan_aborts_with_trace(monkeypatch, ckpt, corpus):
    task = PointsTask(corpus.points[0], 500)
    calls = {"n": 0}
    real = task.loss

    def flaky(verts, faces, rng):
        calls["n"] += 1
        if calls["n"] > 12:  # init scoring uses the first few calls
            raise FloatingPointError("invalid value")
        return real(verts, faces, rng)

    monkeypatch.setattr(task, "loss", flaky)
    with pytest.raises(FitError, match="step"):
        fit(ckpt, task, FitConfig(**QUICK))


def test_world_frame_round_trip(ckpt, corpus):
    pts = corpus.points[0]
    a = fit_to_points(ckpt, pts, QUICK, n_samples=500)
    shift, s = np.array([10.0, -3.0, 2.0]), 7.5
    b = fit_to_points(ckpt, pts * s + shift, QUICK, n_samples=500)
    assert np.allclose(b.raw_mesh.vertices, a.raw_mesh.vertices * s + shift, atol=1e-9)


# planes and volume ----------------------------------------------------------

def test_standard_planes():
    p = standard_planes(6)
    assert [tuple(x.normal) for x in p[:3]] == [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
    assert [x.offset for x in p] == [0, 0, 0, 0.4, 0.4, 0.4]
    assert [x.offset for x in standard_planes(9)[6:]] == [-0.4] * 3
    with pytest.raises(ValueError):
        standard_planes(0)


def test_annotate_planes_drops_misses():
    m = icosphere(2)
    kept, ann = annotate_planes(m, [Plane([0, 0, 1], 0.0), Plane([0, 0, 1], 3.0)], 50, np.random.default_rng(0))
    assert len(kept) == 1 and ann[0].shape == (50, 3)
    assert np.allclose(ann[0][:, 2], 0)


def test_planes_local_beats_global(ckpt):
    gt = normalize_shape(ellipsoid([.9, .5, .6]))[0]
    planes, ann = annotate_planes(gt, standard_planes(3), 300, np.random.default_rng(0))
    local = fit_to_planes(ckpt, planes, ann, QUICK, m=1000)
    glob = fit_to_planes(ckpt, planes, ann, dict(QUICK, mode="global"), m=1000)
    f_local = eval_pair(local.mesh, gt, 20000, np.random.default_rng(5))["f2"]
    f_global = eval_pair(glob.mesh, gt, 20000, np.random.default_rng(5))["f2"]
    assert f_local > f_global


def test_refine_segmentation_outputs(ckpt):
    gt = normalize_shape(ellipsoid([.8, .6, .7]))[0]
    sp = 2.4 / 24
    clean = voxelize(gt, (24, 24, 24), sp, np.full(3, -1.2 + sp / 2))
    res = refine_segmentation(ckpt, clean, {"steps": 20, "template_subdivision": 2})
    assert np.all(res.latents == res.latents[0])
    assert res.mask.dims == clean.dims
    assert dice(res.mask, clean) > 0.5
