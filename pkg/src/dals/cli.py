"""Command-line entry point: ``dals <subcommand> ...``.

Settings resolve in order: built-in defaults, ``--config`` JSON file,
``DALS_<NAME>`` environment variables, then explicit flags. The resolved
settings are written to ``config.json`` in every output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

ENV_PREFIX = "DALS_"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("dals")


class CliError(Exception):
    def __init__(self, message, path=None, expected=None):
        super().__init__(message)
        self.path, self.expected = path, expected


# defaults per subcommand; keys double as flag names (underscores -> dashes)

COMMON = {"seed": 0, "threads": 1, "config": None}
DEFAULTS = {
    "gen-data": {"synthetic": 12, "out": None, "points": 2500, "subdivisions": 4,
                 "grid": 0, "planes": 0, "plane_points": 300},
    "train": {"corpus": None, "synthetic": 0, "out": None, "epochs": 500, "latent_dim": 128,
              "hidden": [724, 724, 362], "lambda_reg": 1e-4, "lambda_n": 1e-3, "lr": 0.002,
              "patience": 100, "points": 2500, "subdivision": 3, "augmentations": 0},
    "fit-points": {"checkpoint": None, "points": None, "out": None, "mode": "local",
                   "lambda_reg": None, "lambda_dir": None, "steps": 800, "lr": 0.002,
                   "samples": 2500, "remesh": True, "remesh_iterations": 5, "subdivision": 4},
    "fit-planes": {"checkpoint": None, "planes": None, "out": None, "mode": "local",
                   "lambda_reg": None, "lambda_dir": None, "steps": 800, "lr": 0.002,
                   "m": 5000, "remesh": True, "remesh_iterations": 5, "subdivision": 4,
                   "center": None, "scale": 1.0},
    "refine-seg": {"checkpoint": None, "mask": None, "out": None, "lambda_reg": None,
                   "lambda_dir": None, "steps": 800, "lr": 0.002, "remesh": False,
                   "remesh_iterations": 5, "subdivision": 4},
    "eval": {"pred": None, "gt": None, "out": None, "samples": 100_000},
    "remesh": {"mesh": None, "out": None, "iterations": 5, "target_length": None},
    "info": {"path": None},
}
REQUIRED = {
    "gen-data": ["out"], "train": ["out"], "fit-points": ["checkpoint", "points", "out"],
    "fit-planes": ["checkpoint", "planes", "out"], "refine-seg": ["checkpoint", "mask", "out"],
    "eval": ["pred", "gt", "out"], "remesh": ["mesh", "out"], "info": ["path"],
}


def _flag(key):
    return "--" + key.replace("_", "-")


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _float(text):
    return math.inf if str(text).lower() in ("inf", "infinity") else float(text)


def _add_option(p, key, default):
    if key == "path":
        p.add_argument("path", nargs="?")
    elif isinstance(default, bool):
        p.add_argument(_flag(key), type=_bool, metavar="BOOL")
    elif isinstance(default, list) or key == "center":
        p.add_argument(_flag(key), type=int if key == "hidden" else float, nargs="+")
    elif isinstance(default, int) and not isinstance(default, bool):
        p.add_argument(_flag(key), type=int)
    elif isinstance(default, float) or key.startswith("lambda") or key == "target_length":
        p.add_argument(_flag(key), type=_float)
    else:
        p.add_argument(_flag(key))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dals", description="Latent-surface shape fitting toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        for key, default in {**COMMON, **defaults}.items():
            _add_option(p, key, default)
    return parser


def _coerce(value, like):
    if isinstance(like, bool):
        return _bool(value)
    if isinstance(like, list):
        return [type(like[0])(v) for v in str(value).replace(",", " ").split()]
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return _float(value)
    return value


def resolve_config(command: str, flags: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    defaults = {**COMMON, **DEFAULTS[command]}
    cfg = dict(defaults)
    path = flags.get("config") or environ.get(ENV_PREFIX + "CONFIG")
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config: {exc}", path, "JSON object") from exc
        if not isinstance(data, dict):
            raise CliError("config must be a JSON object", path, "JSON object")
        unknown = set(data) - set(defaults)
        if unknown:
            raise CliError(f"unknown config keys {sorted(unknown)}", path, "JSON object")
        cfg.update(data)
    for key, default in defaults.items():
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None and key != "config":
            cfg[key] = _coerce(raw, default) if default is not None else raw
    cfg.update(flags)
    cfg["config"] = path
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise CliError(f"missing required settings: {', '.join(_flag(k) for k in missing)}")
    return cfg


def _json_default(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return str(obj)


def _prepare_out(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in cfg.items()}
    (out / "config.json").write_text(json.dumps({"command": command, **echo}, indent=2, sort_keys=True,
                                                default=_json_default))
    root = logging.getLogger("dals")
    for h in list(root.handlers):
        if getattr(h, "_dals_run", False):
            root.removeHandler(h)
            h.close()
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler._dals_run = True
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s %(message)s"))
    logging.getLogger("dals").addHandler(handler)
    logging.getLogger("dals").setLevel(logging.INFO)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _write_trace(path, trace):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "task", "reg", "total"])
        for t in trace:
            w.writerow([t["step"], repr(t["task"]), repr(t["reg"]), repr(t["total"])])


def _load_checkpoint(path):
    from .decoder import load_checkpoint, read_checkpoint_header

    if not Path(path).is_file():
        raise CliError("checkpoint not found", path, "DALS checkpoint")
    read_checkpoint_header(path)
    return load_checkpoint(path)


def _fit_overrides(cfg: dict) -> dict:
    out = {"steps": cfg["steps"], "lr": cfg["lr"], "seed": cfg["seed"], "remesh": cfg["remesh"],
           "remesh_iterations": cfg["remesh_iterations"], "template_subdivision": cfg["subdivision"]}
    if "mode" in cfg:
        out["mode"] = cfg["mode"]
    for key in ("lambda_reg", "lambda_dir"):
        if cfg.get(key) is not None:
            out[key] = float(cfg[key])
    return out


# commands ----------------------------------------------------------------

def cmd_gen_data(cfg):
    import numpy as np

    from .fitting import annotate_planes, standard_planes
    from .geometry import write_obj, write_ply
    from .synthetic import corrupt_mask, synth_corpus
    from .volume import voxelize, write_vox3

    out = _prepare_out(cfg, "gen-data")
    rng = np.random.default_rng(cfg["seed"])
    corpus = synth_corpus(cfg["synthetic"], rng, cfg["points"], cfg["subdivisions"])
    for sub in ("meshes", "points"):
        (out / sub).mkdir(exist_ok=True)
    for sid, mesh, pts in zip(corpus.ids, corpus.meshes, corpus.points):
        write_obj(out / "meshes" / f"{sid}.obj", mesh)
        write_ply(out / "points" / f"{sid}.ply", pts)
    if cfg["grid"]:
        (out / "masks").mkdir(exist_ok=True)
        n = int(cfg["grid"])
        spacing = 2.4 / n
        origin = np.full(3, -1.2 + spacing / 2)
        for i, (sid, mesh) in enumerate(zip(corpus.ids, corpus.meshes)):
            clean = voxelize(mesh, (n, n, n), spacing, origin)
            write_vox3(out / "masks" / f"{sid}.vox3", clean)
            noisy = corrupt_mask(clean, np.random.default_rng([cfg["seed"], i]))
            write_vox3(out / "masks" / f"{sid}_noisy.vox3", noisy)
    if cfg["planes"]:
        (out / "planes").mkdir(exist_ok=True)
        for i, (sid, mesh) in enumerate(zip(corpus.ids, corpus.meshes)):
            planes, ann = annotate_planes(mesh, standard_planes(cfg["planes"]), cfg["plane_points"],
                                          np.random.default_rng([cfg["seed"], i, 1]))
            write_plane_annotations(out / "planes" / f"{sid}.json", planes, ann)
    _write_json(out / "metrics.json", {"shapes": len(corpus)})
    return {"shapes": len(corpus), "out": str(out)}


def _corpus_from_dir(path, n_points, rng):
    from .geometry import read_obj
    from .synthetic import corpus_from_meshes

    files = sorted(Path(path).glob("*.obj"))
    if not files:
        raise CliError("no OBJ files in corpus directory", path, "directory of .obj meshes")
    return corpus_from_meshes([f.stem for f in files], [read_obj(f) for f in files], n_points, rng)


def cmd_train(cfg):
    import numpy as np

    from .decoder import save_checkpoint
    from .synthetic import synth_corpus
    from .training import TrainConfig, train

    out = _prepare_out(cfg, "train")
    rng = np.random.default_rng(cfg["seed"])
    if cfg["corpus"]:
        corpus = _corpus_from_dir(cfg["corpus"], cfg["points"], rng)
    elif cfg["synthetic"]:
        corpus = synth_corpus(cfg["synthetic"], rng, cfg["points"])
    else:
        raise CliError("train needs --corpus DIR or --synthetic N")
    tc = TrainConfig(lambda_reg=cfg["lambda_reg"], lambda_n=cfg["lambda_n"], lr=cfg["lr"],
                     patience=cfg["patience"], epochs=cfg["epochs"], n_points=cfg["points"],
                     latent_dim=cfg["latent_dim"], hidden=tuple(cfg["hidden"]),
                     subdivision=cfg["subdivision"], seed=cfg["seed"],
                     augmentations=cfg["augmentations"])
    ckpt, history = train(corpus, tc, rng, progress=lambda e: log.info("epoch %(epoch)d total %(total).6g", e))
    save_checkpoint(out / "checkpoint.dals", ckpt)
    _write_json(out / "train_log.json", history.epochs)
    metrics = {"eval_loss": ckpt.meta["eval_loss"], "best_epoch": ckpt.meta["best_epoch"],
               "best_epoch_loss": ckpt.meta["best_epoch_loss"]}
    _write_json(out / "metrics.json", metrics)
    return metrics


def _write_fit(out, result, extra=None):
    from .geometry import write_obj

    write_obj(out / "mesh.obj", result.mesh)
    write_obj(out / "mesh_raw.obj", result.raw_mesh)
    _write_trace(out / "trace.csv", result.trace)
    metrics = dict(result.metrics, init_index=result.init_index, **(extra or {}))
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_fit_points(cfg):
    from .fitting import fit_to_points
    from .geometry import read_ply

    ckpt = _load_checkpoint(cfg["checkpoint"])
    points = read_ply(cfg["points"])
    out = _prepare_out(cfg, "fit-points")
    result = fit_to_points(ckpt, points, _fit_overrides(cfg), n_samples=cfg["samples"])
    return _write_fit(out, result)


def read_plane_annotations(path):
    """Plane-annotation JSON: ``[{"normal": [3], "offset": d, "points": [[3], ...]}, ...]``."""
    import numpy as np

    from .geometry import Plane

    try:
        data = json.loads(Path(path).read_text())
        planes = [Plane(np.asarray(e["normal"], dtype=np.float64), float(e["offset"])) for e in data]
        ann = [np.asarray(e["points"], dtype=np.float64).reshape(-1, 3) for e in data]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"bad plane annotations: {exc}", path, "plane-annotation JSON") from exc
    if not planes:
        raise CliError("no planes in annotation file", path, "plane-annotation JSON")
    return planes, ann


def write_plane_annotations(path, planes, annotations):
    doc = [{"normal": p.normal.tolist(), "offset": float(p.offset), "points": [list(map(float, q)) for q in a]}
           for p, a in zip(planes, annotations)]
    Path(path).write_text(json.dumps(doc))


def cmd_fit_planes(cfg):
    from .fitting import fit_to_planes

    ckpt = _load_checkpoint(cfg["checkpoint"])
    planes, ann = read_plane_annotations(cfg["planes"])
    out = _prepare_out(cfg, "fit-planes")
    result = fit_to_planes(ckpt, planes, ann, _fit_overrides(cfg), m=cfg["m"],
                           center=cfg["center"], scale=cfg["scale"])
    return _write_fit(out, result)


def cmd_refine_seg(cfg):
    from .fitting import refine_segmentation
    from .volume import read_vox3, write_vox3

    ckpt = _load_checkpoint(cfg["checkpoint"])
    mask = read_vox3(cfg["mask"])
    out = _prepare_out(cfg, "refine-seg")
    overrides = _fit_overrides(cfg)
    result = refine_segmentation(ckpt, mask, overrides)
    write_vox3(out / "mask.vox3", result.mask, "u8")
    return _write_fit(out, result, {"foreground_voxels": int(result.mask.values.sum())})


def cmd_eval(cfg):
    import numpy as np

    from .geometry import read_obj
    from .metrics import eval_pair, report

    pred_dir, gt_dir = Path(cfg["pred"]), Path(cfg["gt"])
    gts = sorted(gt_dir.glob("*.obj"))
    if not gts:
        raise CliError("no ground-truth OBJ files", gt_dir, "directory of .obj meshes")
    rows, names = [], []
    for g in gts:
        p = pred_dir / g.name
        if not p.is_file():
            p = pred_dir / g.stem / "mesh.obj"
        if not p.is_file():
            raise CliError(f"no prediction for {g.name}", pred_dir, "<name>.obj or <name>/mesh.obj")
        rng = np.random.default_rng([cfg["seed"], len(rows)])
        rows.append(eval_pair(read_obj(p), read_obj(g), cfg["samples"], rng))
        names.append(g.stem)
    rep = report(rows, names)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.to_json(out)
    rep.to_csv(out.with_suffix(".csv"))
    (out.parent / (out.stem + "_config.json")).write_text(
        json.dumps({"command": "eval", **cfg}, indent=2, sort_keys=True, default=_json_default))
    return rep.emitted_summary()


def cmd_remesh(cfg):
    from .geometry import isotropic_remesh, read_obj, triangle_quality_loss, write_obj

    mesh = read_obj(cfg["mesh"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    result = isotropic_remesh(mesh, cfg["target_length"], cfg["iterations"])
    write_obj(out, result)
    return {"vertices": result.n_vertices, "faces": result.n_faces,
            "quality": 1.0 - triangle_quality_loss(result)}


def cmd_info(cfg):
    from .decoder import read_checkpoint_header
    from .geometry import read_obj
    from .volume import read_vox3

    path = Path(cfg["path"])
    if not path.is_file():
        raise CliError("file not found", path, "checkpoint, .vox3 or .obj")
    with open(path, "rb") as fh:
        head = fh.read(64)
    if b'"VOX3"' in head or path.suffix == ".vox3":
        g = read_vox3(path)
        return {"kind": "vox3", "dims": list(g.dims), "spacing": g.spacing.tolist(),
                "origin": g.origin.tolist(), "foreground": int((g.values > 0).sum())}
    if path.suffix == ".obj":
        m = read_obj(path)
        return {"kind": "obj", "vertices": m.n_vertices, "faces": m.n_faces,
                "watertight": m.is_watertight()}
    h = read_checkpoint_header(path)
    return {"kind": "checkpoint", "d": h["latent_dim"], "hidden": h["hidden"],
            "template_subdivision": h["template_subdivision"], "shape_count": h["shape_count"]}


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "fit-points": cmd_fit_points,
    "fit-planes": cmd_fit_planes, "refine-seg": cmd_refine_seg, "eval": cmd_eval,
    "remesh": cmd_remesh, "info": cmd_info,
}


def _error_line(exc) -> str:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    path = getattr(exc, "path", None)
    if path is not None:
        doc["path"] = str(path)
    expected = getattr(exc, "expected", None)
    if expected is not None:
        doc["expected"] = expected
    return json.dumps(doc)


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    try:
        cfg = resolve_config(command, args)
        threads = str(int(cfg["threads"]))
        for var in _THREAD_VARS:
            os.environ[var] = threads
        result = COMMANDS[command](cfg)
    except Exception as exc:  # every failure becomes one machine-readable line
        print(_error_line(exc), file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
