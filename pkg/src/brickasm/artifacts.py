"""JSON artifact I/O: schema validation, canonical encoding and dataset manifests."""
from __future__ import annotations

import hashlib
import json
import os
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from . import __version__
from .errors import SchemaError
from .model import PredictionSet, Scene

MANIFEST = "manifest.json"
SCHEMAS = ("scene", "library", "prediction", "report", "manifest", "gcn_params", "noise", "config")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in SCHEMAS:
        raise ValueError(f"unknown schema {name!r}")
    return json.loads(resources.files("brickasm").joinpath("schemas", f"{name}.schema.json").read_text())


@lru_cache(maxsize=None)
def _validator(name: str):
    schema = load_schema(name)
    cls = jsonschema.validators.validator_for(schema)
    return cls(schema)


def json_pointer(path) -> str:
    parts = [str(p).replace("~", "~0").replace("/", "~1") for p in path]
    return "/" + "/".join(parts) if parts else "/"


def validate(doc, name: str, source: str = "") -> None:
    """Raise SchemaError pointing at the first (deepest-path-first) violation."""
    errors = sorted(_validator(name).iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        e = errors[0]
        where = f"{source}#" if source else ""
        raise SchemaError(e.message, where + json_pointer(e.absolute_path))


def canonical(doc) -> str:
    """Stable text form: sorted keys, fixed separators, trailing newline."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def provenance(config: dict) -> dict:
    return {"tool_version": __version__, "config": config}


def write_json(path, doc) -> str:
    """Write ``doc`` canonically; returns its sha256 hex digest."""
    text = canonical(doc)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_json(path, schema: str | None = None):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg} at line {exc.lineno}", f"{path}#/") from exc
    if schema is not None:
        validate(doc, schema, str(path))
    return doc


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- manifests

def write_manifest(directory, kind: str, entries, config: dict) -> Path:
    """``entries`` are (id, filename, digest) triples, filenames relative to ``directory``."""
    doc = {
        "format": "manifest", "version": 1, "kind": kind,
        "files": [{"id": i, "path": p, "sha256": d} for i, p, d in entries],
        "provenance": provenance(config),
    }
    path = Path(directory) / MANIFEST
    write_json(path, doc)
    return path


def manifest_path(path) -> Path:
    p = Path(path)
    return p / MANIFEST if p.is_dir() else p


def read_manifest(path, verify: bool = True) -> tuple[Path, dict]:
    """Load a manifest (or a directory containing one) and check every digest."""
    mpath = manifest_path(path)
    if not mpath.exists():
        raise SchemaError(f"no manifest at {mpath}", f"{mpath}#/")
    doc = read_json(mpath, "manifest")
    root = mpath.parent
    if verify:
        for k, entry in enumerate(doc["files"]):
            f = root / entry["path"]
            if not f.exists():
                raise SchemaError(f"missing file {entry['path']}", f"{mpath}#/files/{k}/path")
            if sha256_file(f) != entry["sha256"]:
                raise SchemaError(f"digest mismatch for {entry['path']}", f"{mpath}#/files/{k}/sha256")
    return root, doc


def manifest_files(path, kind: str | None = None) -> list[tuple[str, Path]]:
    root, doc = read_manifest(path)
    if kind is not None and doc["kind"] != kind:
        raise SchemaError(f"expected a {kind} manifest, got {doc['kind']}", f"{manifest_path(path)}#/kind")
    return [(e["id"], root / e["path"]) for e in doc["files"]]


def load_scene(path) -> Scene:
    return Scene.from_dict(read_json(path, "scene"))


def load_prediction(path) -> PredictionSet:
    return PredictionSet.from_dict(read_json(path, "prediction"))


def scene_filename(scene_id: str) -> str:
    return f"{scene_id}.json"


def ensure_dir(path) -> Path:
    os.makedirs(path, exist_ok=True)
    return Path(path)
