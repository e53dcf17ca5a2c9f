"""Command-line entry point: ``facadeseg <command> [options]``.

Commands: extract, synth, rasterize, train, infer, eval. Every command takes
``--config <json>`` (flags override file values), ``--seed`` and ``--out``,
and writes ``run.json`` describing the run into the output directory.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import warnings

import numpy as np
from PIL import Image

from . import __version__, kernels

log = logging.getLogger("facadeseg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
CONFIG_VERSION = 1


class UsageError(ValueError):
    """Invalid user input detected before any work starts."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _require(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _json_dump(path, doc):
    from .weights_io import atomic_write_bytes

    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def _read_rgb(path):
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def _write_png(path, arr):
    from .weights_io import atomic_write_bytes
    import io

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def run_record(command, settings):
    import scipy

    canonical = json.dumps(settings, sort_keys=True, default=str)
    return {
        "command": command,
        "settings": json.loads(canonical),
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": settings.get("seed"),
        "versions": {
            "facadeseg": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "kernels": kernels.BACKEND,
        },
    }


def _annotation_pairs(directory):
    """(image path, annotation path) for every ``<id>.json`` with a matching ``<id>.png``."""
    pairs = []
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".json") or name.endswith(".mask.json") or name == "run.json":
            continue
        stem = name[:-5]
        img = os.path.join(directory, stem + ".png")
        pairs.append((img if os.path.exists(img) else None, os.path.join(directory, name)))
    return pairs


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_extract(s):
    from . import geo

    _require(s["footprints"], "--footprints")
    _require(s["spheres"], "--spheres")
    for key in ("tolerance", "height", "piece", "mpp", "radius"):
        if not s[key] > 0:
            raise UsageError(f"--{key} must be positive")
    if s["extension"] < 0:
        raise UsageError("--extension must be >= 0")
    polys = geo.load_footprints(s["footprints"])
    with open(s["spheres"]) as fh:
        records = geo.parse_sphere_manifest(json.load(fh), os.path.dirname(os.path.abspath(s["spheres"])))
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    walls = geo.simplify_and_merge(polys, s["tolerance"])
    quads = []
    for wi, wall in enumerate(walls):
        for pi, piece in enumerate(geo.subdivide_and_extend(wall, s["piece"], s["extension"])):
            qid = f"{wall.source_footprint}.w{wi}.p{pi}"
            quads.append((wall, geo.WallQuad(piece, s["height"], s["mpp"], qid)))
    summary = {"footprints": len(polys), "walls": len(walls), "quads": len(quads), "images": 0,
               "spheres_failed": [], "skipped_pairs": 0}
    if not quads:
        log.info("nothing to do: no walls in %s", s["footprints"])
        return summary
    for rec in records:
        try:
            sphere = geo.sphere_from_record(rec, _read_rgb(rec["image_path"]))
        except (OSError, geo.GeometryError) as exc:
            warnings.warn(f"skipping photosphere {rec['id']}: {exc}")
            summary["spheres_failed"].append(rec["id"])
            continue
        for wall, quad in quads:
            if geo.segment_distance(wall, sphere.center[:2]) > s["radius"]:
                continue
            try:
                face = geo.extract_facade_image(quad, sphere)
            except geo.GeometryError as exc:
                warnings.warn(f"skipping {quad.id} from {sphere.id}: {exc}")
                summary["skipped_pairs"] += 1
                continue
            stem = f"{quad.id}__{sphere.id}"
            _write_png(os.path.join(out, stem + ".png"), face.pixels)
            _json_dump(os.path.join(out, stem + ".json"), face.sidecar())
            summary["images"] += 1
    if records and len(summary["spheres_failed"]) == len(records):
        raise RuntimeError("every photosphere failed to load")
    return summary


def cmd_synth(s):
    from .synth import SynthConfig, generate_corpus

    n = s["n"]
    if n is None or n < 1:
        raise UsageError("--n must be at least 1")
    cfg = SynthConfig(width=s["width"], height=s["height"], mpp=s["mpp"], balconies=not s["no_balconies"])
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    for img, ann in generate_corpus(n, s["seed"], cfg):
        _write_png(os.path.join(out, ann.image_id + ".png"), img)
        _json_dump(os.path.join(out, ann.image_id + ".json"), ann.to_dict())
    return {"images": n}


def _vocabulary(name):
    from .labels import CMP_CLASSES, ECP_CLASSES

    table = {"cmp": CMP_CLASSES, "ecp": ECP_CLASSES}
    if name not in table:
        raise UsageError(f"unknown vocabulary {name!r}; expected one of {sorted(table)}")
    return table[name]


def cmd_rasterize(s):
    from .dataset import ClassStats, load_annotations, rasterize_multilabel, save_mask, stats_to_json

    src = _require(s["annotations"], "--annotations")
    vocab = _vocabulary(s["vocabulary"])
    paths = [p for _, p in _annotation_pairs(src)] if os.path.isdir(src) else [src]
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    stats = ClassStats.empty(vocab)
    for path in paths:
        mask = rasterize_multilabel(load_annotations(path), vocab)
        save_mask(mask, out)
        stats = stats.merge(ClassStats.from_mask(mask))
    freq = stats.frequencies
    weights = None
    if len(paths) and (freq > 0).all():
        from .dataset import median_frequency_weights

        weights = median_frequency_weights(stats)
    _json_dump(os.path.join(out, "class_stats.json"), stats_to_json(stats, weights))
    return {"masks": len(paths)}


def load_training_set(directory, spec):
    """Images and rasterised masks from a directory of ``<id>.png`` + ``<id>.json``."""
    from .dataset import MultiLabelMask, load_annotations, rasterize_multilabel
    from .imaging import resize_bilinear, resize_nearest

    images, masks = [], []
    for img_path, ann_path in _annotation_pairs(directory):
        if img_path is None:
            continue
        ann = load_annotations(ann_path)
        img = _read_rgb(img_path)
        mask = rasterize_multilabel(ann, spec.classes)
        h, w = spec.input_size
        if img.shape[:2] != (h, w):
            img = resize_bilinear(img, h, w)
            mask = MultiLabelMask(resize_nearest(mask.labels, h, w), mask.classes, mask.mpp, mask.image_id)
        images.append(img)
        masks.append(mask)
    if not images:
        raise UsageError(f"no annotated images found in {directory}")
    return images, masks


def cmd_train(s):
    from . import training
    from .architectures import ArchitectureSpec, build, init_refinement

    _require(s["data"], "--data")
    try:
        doc = training.load_preset(s["preset"])
    except ValueError as exc:
        raise UsageError(f"{exc}; available: {training.preset_names()}") from None
    arch = dict(doc["architecture"])
    if s["head"]:
        arch["head"] = s["head"]
    spec = ArchitectureSpec.from_dict(arch).validate()
    sched = training.TrainSchedule.from_dict({**doc["schedule"], "seed": s["seed"]})
    if s["iterations"] is not None:
        if s["iterations"] < 0:
            raise UsageError("--iterations must be >= 0")
        for p in sched.phases:
            p.iterations, p.epochs = s["iterations"], None
    if s["lr"] is not None:
        sched.lr = s["lr"]
    images, masks = load_training_set(s["data"], spec)
    net = build(spec, seed=s["seed"])
    if s["init"]:
        source, _ = training.load_checkpoint(_require(s["init"], "--init"))
        init_refinement(net, source, seed=s["seed"])
    if spec.head == "baseline":
        tiles, loss_cfg = training.joint_training_set(images, masks)
    else:
        tiles, loss_cfg = training.TileSet(images, masks), training.LossConfig(**doc.get("loss", {}))
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    result = training.train(net, tiles, sched, loss_cfg)
    training.save_checkpoint(os.path.join(out, "model.weights"), net, {"schedule": sched.to_dict()})
    _json_dump(os.path.join(out, "losses.json"), {"losses": result.losses, "phase_ends": result.phase_ends})
    return {"iterations": result.iterations, "final_loss": result.losses[-1] if result.losses else None}


def cmd_infer(s):
    from . import inference, training
    from .labels import ECP_COMPOSITE_ORDER

    net, _ = training.load_checkpoint(_require(s["weights"], "--weights"))
    img = _read_rgb(_require(s["image"], "--image"))
    maps = inference.predict_image(img, net)
    out = s["out"]
    stem = os.path.splitext(os.path.basename(s["image"]))[0]
    inference.save_probability_maps(maps, out, stem)
    if maps.joint is not None:
        labels, legend = inference.joint_argmax(maps), list(maps.joint_labels)
    else:
        order = ECP_COMPOSITE_ORDER if s["composite"] == "ecp" else maps.classes
        missing = [c for c in order if c not in maps.classes]
        if missing:
            raise UsageError(f"composite classes {missing} are not predicted by this network")
        labels, legend = inference.composite_single_label(maps.pos, maps.classes, order)
    inference.save_label_image(labels, legend, os.path.join(out, f"{stem}.labels.png"))
    return {"image": stem, "scale": maps.scale, "size": list(labels.shape)}


def _pred_pos(pred_dir, image_id, name, shape):
    """POS' for one class from either saved maps or a saved mask."""
    from .dataset import load_mask
    from .imaging import resize_bilinear
    from .labels import POS
    from .metrics import resolve_edges

    tif = os.path.join(pred_dir, f"{image_id}.{name}.POS_renorm.tif")
    if os.path.exists(tif):
        from .inference import read_float_tiff

        pos = read_float_tiff(tif).astype(np.float64)
        if pos.shape != shape:
            pos = resize_bilinear(pos, *shape)
        return pos
    if os.path.exists(os.path.join(pred_dir, f"{image_id}.mask.json")):
        mask = load_mask(pred_dir, image_id)
        return (resolve_edges(mask.layer(name)) == POS).astype(np.float64)
    raise UsageError(f"no prediction for {image_id!r} in {pred_dir}")


def cmd_eval(s):
    from .dataset import load_mask
    from .metrics import MetricsReport, evaluate_class

    pred_dir = _require(s["pred"], "--pred")
    gt_dir = _require(s["gt"], "--gt")
    if s["boundary"] < 0:
        raise UsageError("--boundary must be >= 0")
    ids = sorted(n[: -len(".mask.json")] for n in os.listdir(gt_dir) if n.endswith(".mask.json"))
    if not ids:
        raise UsageError(f"no ground-truth masks in {gt_dir}")
    evaluations = []
    for image_id in ids:
        gt = load_mask(gt_dir, image_id)
        ev = {}
        for name in gt.classes:
            layer = gt.layer(name)
            pos = _pred_pos(pred_dir, image_id, name, layer.shape)
            ev[name] = evaluate_class(pos, layer, s["boundary"], s["include_edges"])
        evaluations.append(ev)
    report = MetricsReport.build(evaluations)
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    _json_dump(os.path.join(out, "metrics.json"), report.to_dict())
    from .weights_io import atomic_write_bytes

    atomic_write_bytes(os.path.join(out, "metrics.csv"), report.to_csv().encode())
    return {"images": len(ids)}


COMMANDS = {
    "extract": cmd_extract,
    "synth": cmd_synth,
    "rasterize": cmd_rasterize,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}

# built-in defaults, applied beneath config-file values and flags
DEFAULTS = {
    "seed": 0,
    "out": ".",
    "tolerance": 2.0,
    "height": 40.0,
    "piece": 40.0,
    "extension": 2.0,
    "mpp": None,
    "radius": 20.0,
    "n": None,
    "width": 64,
    "no_balconies": False,
    "vocabulary": "cmp",
    "preset": "toy-multihead",
    "head": None,
    "iterations": None,
    "lr": None,
    "init": None,
    "composite": None,
    "boundary": 5,
    "include_edges": False,
}
MPP_DEFAULT = {"extract": 0.025, "synth": 0.1}
SYNTH_HEIGHT = 64


def build_parser():
    parser = argparse.ArgumentParser(prog="facadeseg", description="Multi-label facade segmentation toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("extract", help="facade images from footprints and photospheres"))
    p.add_argument("--footprints")
    p.add_argument("--spheres")
    p.add_argument("--tolerance", type=float, default=None, help="simplification tolerance, m")
    p.add_argument("--height", type=float, default=None, help="wall height, m")
    p.add_argument("--piece", type=float, default=None, help="maximum wall piece length, m")
    p.add_argument("--extension", type=float, default=None, help="extension at both piece ends, m")
    p.add_argument("--mpp", type=float, default=None, help="metres per output pixel")
    p.add_argument("--radius", type=float, default=None, help="sphere-to-wall selection radius, m")

    p = common(sub.add_parser("synth", help="procedural facades with annotations"))
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--mpp", type=float, default=None)
    p.add_argument("--no-balconies", action="store_true", default=None)

    p = common(sub.add_parser("rasterize", help="annotation JSON to per-class masks"))
    p.add_argument("--annotations", help="annotation file or directory")
    p.add_argument("--vocabulary", default=None, help="cmp or ecp")

    p = common(sub.add_parser("train", help="train a network"))
    p.add_argument("--data", help="directory of <id>.png + <id>.json annotations")
    p.add_argument("--preset", default=None)
    p.add_argument("--head", choices=("baseline", "multihead", "separable", "compatibility"), default=None)
    p.add_argument("--iterations", type=int, default=None, help="iterations per phase")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--init", default=None, help="checkpoint to refine from")

    p = common(sub.add_parser("infer", help="predict one image"))
    p.add_argument("--weights")
    p.add_argument("--image")
    p.add_argument("--composite", choices=("ecp",), default=None)

    p = common(sub.add_parser("eval", help="score predictions against masks"))
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--boundary", type=int, default=None, help="boundary exclusion, px")
    p.add_argument("--include-edges", action="store_true", default=None)
    return parser


def resolve_settings(args):
    """Defaults, then config file, then explicit flags."""
    settings = dict(DEFAULTS)
    settings["mpp"] = MPP_DEFAULT.get(args.command)
    if args.command == "synth":
        settings["height"] = SYNTH_HEIGHT
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        version = cfg.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise UsageError(f"unsupported config version {version!r}")
        cfg = cfg.get(args.command, cfg)
        settings.update({k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)})
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose"):
            continue
        if value is not None:
            settings[key] = value
    valid = set(vars(args)) - {"command", "config", "verbose"}
    return {k: v for k, v in settings.items() if k in valid}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        settings = resolve_settings(args)
        summary = COMMANDS[args.command](settings)
        os.makedirs(settings["out"], exist_ok=True)
        record = run_record(args.command, settings)
        record["summary"] = summary
        _json_dump(os.path.join(settings["out"], "run.json"), record)
    except (UsageError, ValueError, KeyError) as exc:
        print(f"facadeseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"facadeseg {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
