"""Checkpoint directories: ``manifest.json`` plus one ``parameters.bin``.

The binary file is the concatenation of tensor records in registration
order; the manifest maps each parameter id to its byte range, owner and
trainable flag and carries the stage configs and the task registry with
per-stage survival masks.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .backbone import ModelState, Parameter, StageConfig, TaskPath
from .tensor import TensorFormatError, tensor_from_bytes, tensor_to_bytes

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
PARAMS = "parameters.bin"


class CheckpointError(RuntimeError):
    pass


def _manifest(model: ModelState, entries: dict, digest: str, size: int) -> dict:
    tasks = []
    for tp in model.tasks.values():
        masks = [[o in tp.groups[s] for o in range(cfg.groups)]
                 for s, cfg in enumerate(model.configs)]
        tasks.append({"task_id": tp.task_id, "composition": list(tp.composition),
                      "constituents": list(tp.constituents), "groups": tp.groups,
                      "survival_masks": masks, "phase": tp.phase})
    return {
        "schema_version": SCHEMA_VERSION,
        "model": {"seed": model.seed, "dtype": model.dtype,
                  "global_residual": model.global_residual, "head_init": model.head_init,
                  "skmm_dim": model.skmm_dim, "skmm_rank": model.skmm_rank,
                  "skmm_hidden": model.skmm_hidden, "pretrained": model.pretrained},
        "stages": [{"width": c.width, "groups": c.groups, "blocks": c.blocks}
                   for c in model.configs],
        "tasks": tasks,
        "parameters": entries,
        "parameters_sha256": digest,
        "parameters_size": size,
    }


def save_checkpoint(model: ModelState, path) -> Path:
    """Write ``path/`` (created if needed); files are replaced atomically."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    chunks, entries, offset = [], {}, 0
    for pid, p in model.params.items():
        rec = tensor_to_bytes(p.value)
        entries[pid] = {"offset": offset, "length": len(rec), "trainable": p.trainable,
                        "owner": p.owner}
        chunks.append(rec)
        offset += len(rec)
    blob = b"".join(chunks)
    manifest = _manifest(model, entries, hashlib.sha256(blob).hexdigest(), len(blob))
    for name, data in ((PARAMS, blob), (MANIFEST, json.dumps(manifest, indent=1).encode())):
        tmp = path / (name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path / name)
    return path


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / PARAMS).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint: {exc.filename} missing") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported schema_version {manifest.get('schema_version')!r}")
    if len(blob) != manifest["parameters_size"]:
        raise CheckpointError(f"parameters.bin is {len(blob)} bytes, manifest says "
                              f"{manifest['parameters_size']}")
    if hashlib.sha256(blob).hexdigest() != manifest["parameters_sha256"]:
        raise CheckpointError("parameters.bin checksum mismatch")
    m = manifest["model"]
    model = ModelState([StageConfig(s["width"], s["groups"], s["blocks"]) for s in manifest["stages"]],
                       m["seed"], m["dtype"], m["global_residual"], m["head_init"],
                       m["skmm_dim"], m["skmm_rank"], m["skmm_hidden"])
    model.pretrained = m["pretrained"]
    for pid, e in manifest["parameters"].items():
        try:
            arr, end = tensor_from_bytes(blob, e["offset"])
        except TensorFormatError as exc:
            raise CheckpointError(f"parameter {pid!r}: {exc}") from None
        if end - e["offset"] != e["length"]:
            raise CheckpointError(f"parameter {pid!r}: length mismatch")
        model.params[pid] = Parameter(pid, np.array(arr), e["trainable"], e["owner"])
    for t in manifest["tasks"]:
        model.tasks[t["task_id"]] = TaskPath(t["task_id"], tuple(t["composition"]),
                                             tuple(t["constituents"]),
                                             [list(g) for g in t["groups"]], t["phase"])
    return model
