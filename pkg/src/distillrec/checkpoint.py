"""Versioned JSON checkpoints and compact state dumps.

Floats are written with ``repr`` precision, so a load followed by a save
reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .nnkit import DTYPE, ShapeError
from .representation import StateInput

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


def params_to_json(params: dict) -> dict:
    return {k: {"shape": list(v.shape), "data": np.asarray(v, dtype=DTYPE).reshape(-1).tolist()}
            for k, v in params.items()}


def params_from_json(blob: dict) -> dict:
    out = {}
    for k, rec in blob.items():
        arr = np.array(rec["data"], dtype=DTYPE)
        shape = tuple(rec["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"block {k}: {arr.size} values do not fill shape {shape}")
        out[k] = arr.reshape(shape)
    return out


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_checkpoint(path, kind: str, dims: dict, params: dict, rng_seed: int = 0,
                    training_step: int = 0, extra: dict | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "dims": dims,
        "rng_seed": int(rng_seed),
        "training_step": int(training_step),
        "extra": extra or {},
        "params": params_to_json(params),
    }
    atomic_write_text(path, json.dumps(doc) + "\n")


def load_checkpoint(path, kind: str | None = None) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc.msg})") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {doc.get('format_version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {doc.get('kind')!r}")
    doc["params"] = params_from_json(doc["params"])
    return doc


def save_teacher(path, net, rng_seed: int = 0, training_step: int = 0, task: int = 0) -> None:
    save_checkpoint(path, "teacher", net.dims.to_dict(), net.params, rng_seed, training_step,
                    {"task": task, "frozen": sorted(net.frozen)})


def load_teacher(path):
    from .teacher import TeacherDims, TeacherNet

    doc = load_checkpoint(path, "teacher")
    try:
        return TeacherNet(doc["params"], TeacherDims.from_dict(doc["dims"]), doc["extra"].get("frozen", ()))
    except (KeyError, ShapeError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def save_student(path, net, rng_seed: int = 0, training_step: int = 0) -> None:
    save_checkpoint(path, "student", net.dims.to_dict(), net.params, rng_seed, training_step)


def load_student(path):
    from .distill import StudentDims, StudentNet

    doc = load_checkpoint(path, "student")
    try:
        return StudentNet(doc["params"], StudentDims.from_dict(doc["dims"]))
    except (KeyError, ShapeError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def save_states(inputs: StateInput, path) -> None:
    """Write a batched :class:`StateInput` as a directory of ``.npy`` files.

    ``np.save`` output carries no timestamps, so identical inputs give identical bytes.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "long_term.npy", inputs.long_term)
    np.save(path / "context.npy", inputs.context)
    hist = path / "history.npy"
    if inputs.history is not None:
        np.save(hist, inputs.history)
    elif hist.exists():
        hist.unlink()


def load_states(path) -> StateInput:
    path = Path(path)
    hist = path / "history.npy"
    return StateInput(np.load(hist) if hist.exists() else None, np.load(path / "long_term.npy"),
                      np.load(path / "context.npy"))
