"""Command-line entry point: ``brickasm <subcommand> ...``.

Exit status is 0 on success, 2 when an input or option fails validation
and 1 on any other error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

from . import __version__
from .artifacts import (ensure_dir, load_prediction, load_scene, manifest_files, provenance, read_json,
                        scene_filename, validate, write_json, write_manifest)
from .errors import BrickAsmError, SchemaError
from .library import get_library
from .metrics import aggregate, evaluate_scene, report_header
from .planner import EDGE_THRESHOLD, Tolerances
from .relgcn import TrainConfig, load_params, params_to_dict, scene_features, train
from .scenegen import GenConfig, annotate, dataset_stats, generate_scene
from .solve import solve
from .stub import PRESETS, NoiseConfig, load_preset, perturb
from .triangulate import DEFAULT_THETA

log = logging.getLogger("brickasm")

CONFIG_ENV = "BRICKASM_CONFIG"


def default_config() -> dict:
    return {
        "gen": GenConfig().to_dict(),
        "noise": NoiseConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "solve": {"theta": DEFAULT_THETA, "threshold": EDGE_THRESHOLD, "oracle": False},
        "eval": {},
    }


def _jsonable(d):
    return json.loads(json.dumps(d))


def resolve_config(path: str | None, seed: int | None) -> dict:
    """Defaults, then the JSON override file, then ``--seed``."""
    cfg = _jsonable(default_config())
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is not None:
        overrides = read_json(path, "config")
        for section, values in overrides.items():
            cfg[section].update(values)
    if seed is not None:
        for section in ("gen", "noise", "train"):
            cfg[section]["seed"] = seed
    _check(lambda: GenConfig.from_dict(cfg["gen"]), "/gen")
    _check(lambda: NoiseConfig.from_dict(cfg["noise"]), "/noise")
    _check(lambda: TrainConfig(**cfg["train"]), "/train")
    return cfg


def _check(fn, pointer):
    try:
        return fn()
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc), "config#" + pointer) from exc


def pmap(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _record(args, cfg, sections) -> dict:
    """Resolved config recorded in artifacts; paths are left out so reruns elsewhere match."""
    opts = {k: v for k, v in vars(args).items()
            if k not in ("func", "out", "data", "pred", "gt", "report", "csv", "params", "config", "noise_file",
                         "jobs", "verbose")}
    return {"command": args.command, "options": _jsonable(opts), **{s: cfg[s] for s in sections}}


# ---------------------------------------------------------------- workers (top level for pickling)

def _gen_one(index, gen_cfg):
    return generate_scene(GenConfig.from_dict(gen_cfg), index).to_dict()


def _annotate_one(path, resolution):
    scene = load_scene(path)
    return annotate(scene, tuple(resolution)).to_dict()


def _perturb_one(path, noise):
    scene = load_scene(path)
    return perturb(scene, NoiseConfig.from_dict(noise)).to_dict()


def _solve_one(pair, params_path, solve_cfg):
    pred_path, gt_path = pair
    pred, scene = load_prediction(pred_path), load_scene(gt_path)
    params = None if solve_cfg["oracle"] else load_params(params_path)
    out = solve(pred, scene, get_library(scene.library_ref), params, solve_cfg["oracle"],
                solve_cfg["theta"], solve_cfg["threshold"])
    return out.to_dict()


def _eval_one(pair, eval_cfg):
    pred_path, gt_path = pair
    pred, scene = load_prediction(pred_path), load_scene(gt_path)
    tol = Tolerances.for_style(scene.meta.get("style", "clevr"))
    if "position_tol" in eval_cfg or "rotation_tol_deg" in eval_cfg:
        tol = Tolerances(eval_cfg.get("position_tol", tol.position),
                         math.radians(eval_cfg["rotation_tol_deg"]) if "rotation_tol_deg" in eval_cfg
                         else tol.rotation)
    return evaluate_scene(pred, scene, get_library(scene.library_ref), tol)


def _write_docs(out, kind, docs, record):
    ensure_dir(out)
    entries = []
    for doc in docs:
        doc = {**doc, "provenance": provenance(record)}
        name = scene_filename(doc["scene_id"])
        entries.append((doc["scene_id"], name, write_json(Path(out) / name, doc)))
    return write_manifest(out, kind, entries, record)


def _pair(pred_dir, gt_dir):
    gt = dict(manifest_files(gt_dir, "scenes"))
    pairs = []
    for sid, path in manifest_files(pred_dir, "predictions"):
        if sid not in gt:
            raise SchemaError(f"prediction {sid} has no ground-truth scene", f"{gt_dir}#/files")
        pairs.append((path, gt[sid]))
    return pairs


# ---------------------------------------------------------------- subcommands

def cmd_gen(args, cfg):
    if args.style:
        cfg["gen"]["style"] = args.style
    gen = _check(lambda: GenConfig.from_dict(cfg["gen"]), "/gen")
    if args.count < 1:
        raise SchemaError("count must be >= 1", "/count")
    record = _record(args, cfg, ["gen"])
    results = pmap(partial(_gen_one, gen_cfg=gen.to_dict()), range(args.start, args.start + args.count), args.jobs)
    path = _write_docs(args.out, "scenes", results, record)
    print(f"wrote {len(results)} scenes and {path}")


def cmd_annotate(args, cfg):
    files = manifest_files(args.data, "scenes")
    record = _record(args, cfg, [])
    docs = pmap(partial(_annotate_one, resolution=args.resolution), [p for _, p in files], args.jobs)
    path = _write_docs(args.out, "scenes", docs, record)
    print(f"annotated {len(docs)} scenes -> {path}")


def cmd_stats(args, cfg):
    scenes = [load_scene(p) for _, p in manifest_files(args.data, "scenes")]
    s = dataset_stats(scenes)
    doc = {"scenes": s.scenes, "mean_brick_count": s.mean_brick_count,
           "mean_visibility": s.mean_visibility, "mean_graph_depth": s.mean_graph_depth,
           "provenance": provenance(_record(args, cfg, []))}
    if args.out:
        write_json(args.out, doc)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["statistic", "value"])
            for k in ("scenes", "mean_brick_count", "mean_visibility", "mean_graph_depth"):
                w.writerow([k, doc[k]])
    print(json.dumps({k: v for k, v in doc.items() if k != "provenance"}, indent=2))


def cmd_perturb(args, cfg):
    noise = dict(cfg["noise"])
    if args.preset:
        seed = noise["seed"]
        noise = {**load_preset(args.preset).to_dict(), "seed": seed}
    if args.noise_file:
        noise.update(read_json(args.noise_file, "noise"))
    cfg["noise"] = _check(lambda: NoiseConfig.from_dict(noise), "/noise").to_dict()
    files = manifest_files(args.data, "scenes")
    record = _record(args, cfg, ["noise"])
    docs = pmap(partial(_perturb_one, noise=cfg["noise"]), [p for _, p in files], args.jobs)
    path = _write_docs(args.out, "predictions", docs, record)
    print(f"perturbed {len(docs)} scenes -> {path}")


def cmd_train(args, cfg):
    for k in ("epochs", "hidden", "lr"):
        if getattr(args, k) is not None:
            cfg["train"][k] = getattr(args, k)
    tcfg = _check(lambda: TrainConfig(**cfg["train"]), "/train")
    scenes = [load_scene(p) for _, p in manifest_files(args.data, "scenes")]
    if not scenes:
        raise SchemaError("training manifest lists no scenes", f"{args.data}#/files")
    library = get_library(scenes[0].library_ref)
    dataset = [(scene_features(library, s), list(s.support_edges)) for s in scenes]
    result = train(dataset, tcfg)
    record = _record(args, cfg, ["train"])
    meta = {"epoch_losses": result.epoch_losses, "steps": result.steps, "library_ref": library.name}
    doc = params_to_dict(result.params, meta)
    doc["provenance"] = provenance(record)
    write_json(args.out, doc)
    print(f"trained {result.steps} steps; final mean loss {result.epoch_losses[-1]:.5f} -> {args.out}")


def cmd_solve(args, cfg):
    if args.oracle:
        cfg["solve"]["oracle"] = True
    if args.theta is not None:
        cfg["solve"]["theta"] = args.theta
    if not cfg["solve"]["oracle"] and not args.params:
        raise SchemaError("--params is required unless --oracle is given", "/params")
    if args.params:
        read_json(args.params, "gcn_params")
    pairs = _pair(args.pred, args.gt)
    record = _record(args, cfg, ["solve"])
    docs = pmap(partial(_solve_one, params_path=args.params, solve_cfg=cfg["solve"]), pairs, args.jobs)
    path = _write_docs(args.out, "predictions", docs, record)
    print(f"solved {len(docs)} scenes -> {path}")


def cmd_eval(args, cfg):
    pairs = _pair(args.pred, args.gt)
    scores = pmap(partial(_eval_one, eval_cfg=cfg["eval"]), pairs, args.jobs)
    report = aggregate(scores)
    doc = {
        "format": "report", "version": 1,
        "metrics": report.to_dict(),
        "header": report_header(),
        "scenes": len(scores),
        "per_scene": [{"scene_id": Path(p).stem, "n_gt": s.n_gt, "prefix": s.prefix,
                       "type_prefix": s.type_prefix, "count_ok": s.count_ok} for (p, _), s in zip(pairs, scores)],
        "provenance": provenance(_record(args, cfg, ["eval"])),
    }
    validate(doc, "report")
    write_json(args.report, doc)
    print(json.dumps(doc["metrics"], indent=2))


def cmd_cca(args, cfg):
    doc = read_json(args.report, "report")
    hist = doc["metrics"]["cca_histogram"]
    with open(args.csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prefix_length", "probability"])
        for k, p in enumerate(hist):
            w.writerow([k, repr(float(p))])
    print(f"wrote {len(hist)} rows -> {args.csv}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for generation, noise and training")
    common.add_argument("--jobs", type=int, default=1, help="parallel scene workers")
    common.add_argument("--config", default=None, help=f"JSON overrides (default: ${CONFIG_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="brickasm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"brickasm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate scenes")
    g.add_argument("--style", choices=["clevr", "lego"], default=None)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--start", type=int, default=0, help="index of the first scene")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("annotate", parents=[common], help="fill in per-view annotations")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--resolution", type=int, nargs=2, default=[224, 224], metavar=("H", "W"))
    a.set_defaults(func=cmd_annotate)

    s = sub.add_parser("stats", parents=[common], help="dataset statistics")
    s.add_argument("--data", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--csv", default=None)
    s.set_defaults(func=cmd_stats)

    n = sub.add_parser("perturb", parents=[common], help="simulate detector output")
    n.add_argument("--data", required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--preset", choices=PRESETS, default=None)
    n.add_argument("--noise", dest="noise_file", default=None, help="NoiseConfig JSON file")
    n.set_defaults(func=cmd_perturb)

    t = sub.add_parser("train-gcn", parents=[common], help="train the relation network")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--hidden", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("solve", parents=[common], help="recover poses, graph and plan")
    v.add_argument("--pred", required=True)
    v.add_argument("--gt", required=True, help="scenes supplying the cameras")
    v.add_argument("--out", required=True)
    v.add_argument("--params", default=None)
    v.add_argument("--oracle", action="store_true", help="use the true support graph")
    v.add_argument("--theta", type=float, default=None)
    v.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", parents=[common], help="score predictions")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cca", parents=[common], help="export the CCA histogram")
    c.add_argument("--report", required=True)
    c.add_argument("--csv", required=True)
    c.set_defaults(func=cmd_cca)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.seed)
        args.func(args, copy.deepcopy(cfg))
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (BrickAsmError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
