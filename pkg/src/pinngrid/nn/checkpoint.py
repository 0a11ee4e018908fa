"""Versioned JSON checkpoint container.

Layout::

    {"format": "pinngrid-checkpoint", "version": 1, "kind": <str>,
     "spec": {...}, "params": [float, ...], "extra": {...}}

Floats are written with ``repr`` precision, so a save/load cycle is exact.
"""
from __future__ import annotations

import json
from pathlib import Path

FORMAT = "pinngrid-checkpoint"
VERSION = 1


def save_checkpoint(path, kind: str, spec: dict, params, extra: dict | None = None):
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, "spec": spec,
           "params": [float(v) for v in params], "extra": extra or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    if kind is not None and doc.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    return doc
