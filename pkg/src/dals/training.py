"""Auto-decoder training: decoder weights and one latent per shape, learned jointly."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .decoder import (
    DEFAULT_HIDDEN,
    DEFAULT_LATENT_DIM,
    Checkpoint,
    DecoderParams,
    deform_vertices,
    random_rotation,
)
from .geometry import TriMesh, icosphere, sample_surface
from .losses import chamfer, latent_norm_penalty, quality_regularizer, sampled_points
from .synthetic import ShapeCorpus, augment_corpus

log = logging.getLogger(__name__)

EVAL_SEED = 12345


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_reg: float = 1e-4
    lambda_n: float = 1e-3
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    patience: int = 100
    lr_floor: float = 1e-5
    epochs: int = 500
    n_points: int = 2500
    latent_dim: int = DEFAULT_LATENT_DIM
    hidden: tuple = DEFAULT_HIDDEN
    subdivision: int = 3
    seed: int = 0
    augmentations: int = 0
    latent_init_std: float = 0.01
    rotate: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if min(self.lr, self.lr_floor, self.beta1, self.beta2) <= 0:
            raise ValueError("rates must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lambda_reg < 0 or self.lambda_n < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class PlateauSchedule:
    """Halve the rate after ``patience`` epochs without a new best loss, never below ``floor``."""

    def __init__(self, lr: float, patience: int, floor: float, factor: float = 0.5):
        self.lr, self.patience, self.floor, self.factor = lr, patience, floor, factor
        self.best = np.inf
        self.wait = 0

    def step(self, loss: float) -> bool:
        """Feed one epoch loss; returns True when it is a new best."""
        if loss < self.best:
            self.best = loss
            self.wait = 0
            return True
        self.wait += 1
        if self.wait >= self.patience:
            self.lr = max(self.lr * self.factor, self.floor)
            self.wait = 0
        return False


@dataclass
class StepTerms:
    chamfer: float
    reg: float
    latent: float
    total: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def append(self, epoch, terms, lr):
        n = len(terms)
        self.epochs.append({
            "epoch": epoch,
            "chamfer": sum(t.chamfer for t in terms) / n,
            "reg": sum(t.reg for t in terms) / n,
            "latent": sum(t.latent for t in terms) / n,
            "total": sum(t.total for t in terms) / n,
            "lr": lr,
        })


def shape_step(weights: dict, tape: dc.Tape, z: dc.Tensor, template: TriMesh, target: np.ndarray,
               config: TrainConfig, rng: np.random.Generator):
    """Build the per-shape training objective on ``tape``; returns (loss tensor, StepTerms)."""
    verts = deform_vertices(weights, z, template.vertices)
    samples = sample_surface(TriMesh(verts.value, template.faces), config.n_points, rng)
    cf = chamfer(sampled_points(verts, template.faces, samples), target)
    reg = quality_regularizer(verts, template.faces)
    nz = latent_norm_penalty(z)
    total = dc.add(dc.add(cf, dc.scale(reg, config.lambda_reg)), dc.scale(nz, config.lambda_n))
    terms = StepTerms(float(cf.value), float(reg.value), float(nz.value), float(total.value))
    return total, terms


def train(corpus: ShapeCorpus, config: TrainConfig, rng: np.random.Generator | None = None,
          progress=None):
    """Returns ``(checkpoint, log)``; the checkpoint holds the best-epoch state."""
    if len(corpus) == 0:
        raise ValueError("training corpus is empty")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    corpus = augment_corpus(corpus, config.augmentations, rng)
    n = len(corpus)
    params = DecoderParams.init(config.latent_dim, config.hidden, rng)
    latents = rng.normal(0.0, config.latent_init_std, size=(n, config.latent_dim))
    names = params.names
    theta_opt = dc.Adam([params.arrays[k].shape for k in names], config.lr, config.beta1, config.beta2)
    z_opts = [dc.Adam([(1, config.latent_dim)], config.lr, config.beta1, config.beta2) for _ in range(n)]
    schedule = PlateauSchedule(config.lr, config.patience, config.lr_floor)
    template = icosphere(config.subdivision)
    history = TrainLog()
    best = (params.copy(), latents.copy(), np.inf, -1)

    for epoch in range(config.epochs):
        terms = []
        for i in rng.permutation(n):
            tmpl = template
            if config.rotate:
                r = random_rotation(rng)
                tmpl = TriMesh(template.vertices @ r.T, template.faces)
            tape = dc.Tape()
            weights = params.watch(tape)
            z = tape.watch(latents[i:i + 1])
            try:
                total, t = shape_step(weights, tape, z, tmpl, corpus.points[i], config, rng)
                grads = dc.backward(tape, total)
                new = theta_opt.step([params.arrays[k] for k in names], [grads[weights[k]] for k in names])
                (latents[i:i + 1],) = z_opts[i].step([latents[i:i + 1]], [grads[z]])
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, shape {corpus.ids[i]!r}: {exc}") from exc
            params.arrays = dict(zip(names, new))
            terms.append(t)
        history.append(epoch, terms, schedule.lr)
        epoch_loss = history.epochs[-1]["total"]
        if schedule.step(epoch_loss):
            best = (params.copy(), latents.copy(), epoch_loss, epoch)
        theta_opt.lr = schedule.lr
        for opt in z_opts:
            opt.lr = schedule.lr
        if progress is not None:
            progress(history.epochs[-1])
        log.debug("epoch %d loss %.6g lr %.3g", epoch, epoch_loss, schedule.lr)

    best_params, best_latents, best_loss, best_epoch = best
    ckpt = Checkpoint(best_params, best_latents, config.subdivision, list(corpus.ids),
                      meta={"train_config": config.to_dict(), "best_epoch_loss": best_loss,
                            "best_epoch": best_epoch, "eval_seed": EVAL_SEED})
    fits = evaluate_training_fit(ckpt, corpus)
    ckpt.meta["fit_chamfer"] = fits
    ckpt.meta["eval_loss"] = float(np.mean(fits))
    return ckpt, history


def evaluate_training_fit(ckpt: Checkpoint, corpus: ShapeCorpus, seed: int = EVAL_SEED,
                          n_points: int | None = None) -> list:
    """Chamfer between each shape's broadcast-latent reconstruction and its fixed target samples."""
    template = icosphere(ckpt.template_subdivision)
    weights = ckpt.params.constants()
    n_points = n_points or ckpt.meta.get("train_config", {}).get("n_points", 2500)
    out = []
    index = {sid: i for i, sid in enumerate(ckpt.shape_ids)}
    for sid, pts in zip(corpus.ids, corpus.points):
        rng = np.random.default_rng([seed, index[sid]])
        z = dc.Tensor(ckpt.latents[index[sid]:index[sid] + 1])
        v = deform_vertices(weights, z, template.vertices).value
        s = sample_surface(TriMesh(v, template.faces), n_points, rng)
        out.append(float(chamfer(s.points, pts).value))
    return out
