"""Checkpoint directories: ``model.json`` plus one tensor file per array.

Layout::

    model.json            config echo, tensor listing, optional extra state
    <param name>.gmvt     one per parameter and batch-norm buffer
    momentum/<name>.gmvt  optional optimizer momentum, same names
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..autodiff import SGD, serialize
from .config import ModelConfig
from .gmvit import GMViT

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: GMViT, path: str | Path, optimizer: SGD | None = None,
                    extra: dict | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    listing = []
    for kind, items in (("param", model.named_parameters()), ("buffer", model.named_buffers())):
        for name, arr in items:
            data = arr.data if kind == "param" else arr
            fname = f"{name}.gmvt"
            serialize.save(root / fname, np.ascontiguousarray(data))
            listing.append({"name": name, "kind": kind, "shape": list(data.shape),
                            "dtype": str(data.dtype), "file": fname})
    meta = {"format": "gmvit-checkpoint", "version": CHECKPOINT_VERSION,
            "config": model.config.to_dict(), "num_parameters": model.num_parameters(),
            "retrieval_width": model.config.retrieval_width, "tensors": listing,
            "has_momentum": optimizer is not None, "extra": extra or {}}
    if optimizer is not None:
        (root / "momentum").mkdir(exist_ok=True)
        names = [n for n, _ in model.named_parameters()]
        if len(names) != len(optimizer.params):
            raise CheckpointError("optimizer parameters do not match the model")
        for name, buf in zip(names, optimizer.buffers()):
            serialize.save(root / "momentum" / f"{name}.gmvt", buf)
    (root / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return root


def read_meta(path: str | Path) -> dict:
    mpath = Path(path) / "model.json"
    if not mpath.exists():
        raise CheckpointError(f"no model.json in {path}")
    meta = json.loads(mpath.read_text(encoding="utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    return meta


def load_checkpoint(path: str | Path, optimizer: SGD | None = None) -> tuple[GMViT, dict]:
    """Rebuild the model from its config echo and load every tensor.

    If ``optimizer`` is given (bound to a fresh model's parameters it will be
    rebound to the loaded model) its momentum buffers are restored too.
    Returns (model, meta).
    """
    root = Path(path)
    meta = read_meta(root)
    model = GMViT(ModelConfig.from_dict(meta["config"]))
    state = {}
    for rec in meta["tensors"]:
        try:
            arr = serialize.load(root / rec["file"])
        except (OSError, serialize.TensorFormatError) as exc:
            raise CheckpointError(f"cannot read {rec['file']}: {exc}") from exc
        if list(arr.shape) != rec["shape"]:
            raise CheckpointError(f"{rec['name']}: stored shape {arr.shape} != listed {rec['shape']}")
        state[rec["name"]] = arr
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    if optimizer is not None:
        if not meta.get("has_momentum"):
            raise CheckpointError("checkpoint has no optimizer state")
        optimizer.params = model.parameters()
        optimizer.load_buffers([serialize.load(root / "momentum" / f"{n}.gmvt")
                                for n, _ in model.named_parameters()])
    return model, meta
