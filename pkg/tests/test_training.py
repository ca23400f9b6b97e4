import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dals import diffcore as dc
from dals import training
from dals.decoder import DecoderParams, load_checkpoint, save_checkpoint
from dals.geometry import TriMesh, icosphere, normalize_points
from dals.synthetic import (
    AXIS_RANGE,
    MAX_BUMP_DEPTH,
    augment_corpus,
    augment_shape,
    corpus_from_meshes,
    random_shape_params,
    smooth_displacement,
    synth_corpus,
)
from dals.training import PlateauSchedule, TrainConfig, TrainingError, evaluate_training_fit, shape_step, train

TINY = dict(latent_dim=8, hidden=(32, 32, 16), n_points=500, subdivision=2)


def ellipsoid_corpus(seed=0):
    base = icosphere(3)
    meshes = [TriMesh(base.vertices * a, base.faces) for a in ([1, .6, .5], [.5, 1, .7], [.8, .8, .4])]
    return corpus_from_meshes(["e0", "e1", "e2"], meshes, 500, np.random.default_rng(seed))


# schedule ----------------------------------------------------------------------

def test_plateau_halves_every_patience_until_floor():
    s = PlateauSchedule(0.002, patience=3, floor=1e-5)
    s.step(1.0)
    lrs = []
    for _ in range(40):
        s.step(1.0)  # frozen loss
        lrs.append(s.lr)
    expected, lr = [], 0.002
    for i in range(1, 41):
        if i % 3 == 0:
            lr = max(lr / 2, 1e-5)
        expected.append(lr)
    assert lrs == expected
    assert lrs[-1] == 1e-5


def test_plateau_resets_on_improvement():
    s = PlateauSchedule(1.0, patience=2, floor=0.1)
    assert s.step(3.0)
    assert not s.step(3.0)
    assert s.step(2.0)
    assert not s.step(2.5)
    assert s.lr == 1.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(lambda_n=-1)
    c = TrainConfig()
    assert (c.lambda_reg, c.lambda_n, c.lr, c.beta1, c.beta2) == (1e-4, 1e-3, 0.002, 0.9, 0.999)
    assert (c.patience, c.lr_floor, c.subdivision) == (100, 1e-5, 3)


# objective -----------------------------------------------------------------------

def test_loss_terms_sum_to_total():
    corpus = ellipsoid_corpus()
    cfg = TrainConfig(**TINY, lambda_reg=0.3, lambda_n=0.7)
    params = DecoderParams.init(8, (32, 32, 16), np.random.default_rng(0))
    params.arrays["Wout"] = np.random.default_rng(1).normal(size=params.arrays["Wout"].shape) * 0.1
    tape = dc.Tape()
    w = params.watch(tape)
    z = tape.watch(np.random.default_rng(2).normal(size=(1, 8)))
    total, t = shape_step(w, tape, z, icosphere(2), corpus.points[0], cfg, np.random.default_rng(3))
    assert abs(t.chamfer + 0.3 * t.reg + 0.7 * t.latent - t.total) < 1e-10
    assert float(total.value) == t.total
    grads = dc.backward(tape, total)
    assert grads[z].shape == (1, 8)


def test_training_reduces_chamfer_and_one_latent_per_shape():
    corpus = ellipsoid_corpus()
    ckpt, log = train(corpus, TrainConfig(**TINY, epochs=2000, seed=0))
    assert ckpt.latents.shape == (3, 8)
    assert ckpt.shape_ids == ["e0", "e1", "e2"]
    assert log.epochs[-1]["chamfer"] <= 0.1 * log.epochs[0]["chamfer"]
    assert len(log.epochs) == 2000
    assert all({"chamfer", "reg", "latent", "total", "lr"} <= set(e) for e in log.epochs)


def test_latent_penalty_bounds_norms():
    norms = {}
    for ln in (1e-3, 0.0):
        ckpt, _ = train(ellipsoid_corpus(), TrainConfig(**TINY, epochs=400, lambda_n=ln))
        norms[ln] = np.linalg.norm(ckpt.latents, axis=1).max()
    assert norms[1e-3] < norms[0.0]


def test_nan_loss_aborts_with_shape_id(monkeypatch):
    def broken(pred, target):
        return dc._op("chamfer", np.array(np.nan), (dc.as_tensor(pred),), lambda g: (None,))

    monkeypatch.setattr(training, "chamfer", broken)
    with pytest.raises(TrainingError, match=r"epoch 0, shape 'e\d'"):
        train(ellipsoid_corpus(), TrainConfig(**TINY, epochs=2))


def test_empty_corpus_rejected():
    empty = corpus_from_meshes([], [], 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        train(empty, TrainConfig(**TINY, epochs=1))


def test_training_is_deterministic_and_checkpoint_reproduces_eval(tmp_path):
    cfg = TrainConfig(**TINY, epochs=5, seed=3)
    a, _ = train(ellipsoid_corpus(), cfg)
    b, _ = train(ellipsoid_corpus(), cfg)
    assert np.array_equal(a.latents, b.latents)
    assert all(np.array_equal(a.params.arrays[k], b.params.arrays[k]) for k in a.params.arrays)
    save_checkpoint(tmp_path / "c.dals", a)
    back = load_checkpoint(tmp_path / "c.dals")
    fits = evaluate_training_fit(back, ellipsoid_corpus())
    assert float(np.mean(fits)) == a.meta["eval_loss"]
    assert back.meta["best_epoch_loss"] == a.meta["best_epoch_loss"]


def test_augmented_training_rows():
    ckpt, _ = train(ellipsoid_corpus(), TrainConfig(**TINY, epochs=1, augmentations=2))
    assert ckpt.latents.shape[0] == 9
    assert ckpt.shape_ids[3:5] == ["e0_aug0", "e0_aug1"]


# synthetic corpus ------------------------------------------------------------------

def test_synth_corpus_shapes_are_watertight_genus_zero():
    corpus = synth_corpus(4, np.random.default_rng(0), n_points=300)
    for mesh, pts in zip(corpus.meshes, corpus.points):
        assert mesh.is_watertight() and mesh.euler_characteristic() == 2
        assert np.linalg.norm(pts, axis=1).max() <= 1 + 1e-12
        assert np.linalg.norm(mesh.vertices, axis=1).max() <= 1 + 1e-12


def test_synth_corpus_deterministic():
    a = synth_corpus(3, np.random.default_rng(7), n_points=100)
    b = synth_corpus(3, np.random.default_rng(7), n_points=100)
    assert a.ids == b.ids
    assert all(np.array_equal(x, y) for x, y in zip(a.points, b.points))
    assert all(np.array_equal(x.vertices, y.vertices) for x, y in zip(a.meshes, b.meshes))


@given(st.integers(0, 100_000))
def test_shape_parameters_in_range(seed):
    p = random_shape_params(np.random.default_rng(seed))
    assert np.all((p.axes >= AXIS_RANGE[0]) & (p.axes <= AXIS_RANGE[1]))
    assert 1 <= len(p.bump_depths) <= 3
    assert np.all(np.abs(p.bump_depths) <= MAX_BUMP_DEPTH)


def test_synth_corpus_rejects_zero():
    with pytest.raises(ValueError):
        synth_corpus(0, np.random.default_rng(0))


# augmentation ----------------------------------------------------------------------

def test_zero_displacement_is_identity():
    pts = ellipsoid_corpus().points[0]
    out = augment_shape(pts, np.random.default_rng(0), displacements=np.zeros((4, 3)))
    assert np.allclose(out, normalize_points(pts)[0], atol=1e-12)
    again = augment_shape(out, np.random.default_rng(0), displacements=np.zeros((4, 3)))
    assert np.allclose(again, out, atol=1e-12)


@given(st.integers(0, 10_000))
def test_displacement_bounded_and_output_normalized(seed):
    r = np.random.default_rng(seed)
    pts = ellipsoid_corpus().points[1][:300]
    anchors = pts[r.integers(0, len(pts), size=4)]
    disp = r.normal(size=(4, 3))
    disp *= r.uniform(0, 0.1, size=(4, 1)) / np.linalg.norm(disp, axis=1, keepdims=True)
    moved = smooth_displacement(pts, anchors, disp)
    assert np.linalg.norm(moved - pts, axis=1).max() <= np.linalg.norm(disp, axis=1).max() + 1e-15
    out = augment_shape(pts, r)
    assert np.allclose(out.mean(0), 0, atol=1e-12)
    assert abs(np.linalg.norm(out, axis=1).max() - 1) < 1e-12


def test_augment_corpus_counts():
    c = augment_corpus(ellipsoid_corpus(), 2, np.random.default_rng(0))
    assert len(c) == 9 and len(c.points) == 9
