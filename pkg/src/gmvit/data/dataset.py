"""Synthetic multi-view datasets on disk.

A dataset directory holds ``manifest.json`` plus ``train.bin`` / ``test.bin``.
Each blob is a concatenation of tensor records (one (N, H, W) u8 image stack
per sample, value = round(255 * pixel)); the manifest lists every record's
offset, byte length and label, and a SHA-256 per blob.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from ..autodiff import serialize
from .render import render_views
from .rigs import CameraRig, make_rig
from .shapes import CLASS_NAMES, sample_shape

MANIFEST_VERSION = 1
SPLITS = ("train", "test")
_SPLIT_CODE = {"train": 1, "test": 2}


class CorruptDatasetError(ValueError):
    pass


@dataclass
class DatasetConfig:
    rig: str = "dodeca20"
    C: int = 8
    per_class_train: int = 25
    per_class_test: int = 10
    H: int = 32
    W: int = 32
    seed: int = 0
    # dense enough that a 32x32 silhouette has no visible splat holes
    points: int = 8192

    def validate(self) -> None:
        make_rig(self.rig)
        if not 1 <= self.C <= len(CLASS_NAMES):
            raise ValueError(f"C must be in [1, {len(CLASS_NAMES)}], got {self.C}")
        if self.per_class_train < 1 or self.per_class_test < 1:
            raise ValueError("per-class sample counts must be at least 1")
        if self.H < 1 or self.W < 1:
            raise ValueError("image size must be positive")


@dataclass
class MultiViewSample:
    images: np.ndarray  # (N, H, W) in [0, 1]
    camera_positions: np.ndarray  # (N, 3), row i is the camera of image i
    label: int
    sample_id: str = ""


def shape_seed(base_seed: int, split: str, class_id: int, index: int) -> int:
    """Per-object seed; train and test draw from disjoint spawn keys."""
    ss = np.random.SeedSequence(base_seed, spawn_key=(_SPLIT_CODE[split], class_id, index))
    return int(ss.generate_state(1, np.uint64)[0])


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def build_dataset(config: DatasetConfig, path: str | Path) -> Path:
    """Render and persist every sample; a pure function of ``config``."""
    config.validate()
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    rig = make_rig(config.rig)
    counts = {"train": config.per_class_train, "test": config.per_class_test}
    splits = {}
    for split in SPLITS:
        records, chunks, offset = [], [], 0
        for i in range(counts[split]):
            for c in range(config.C):
                seed = shape_seed(config.seed, split, c, i)
                shape = sample_shape(c, seed, config.points)
                imgs = _to_u8(render_views(shape.surface_points, rig.positions, config.H, config.W))
                blob = serialize.encode(imgs)
                records.append({"id": f"{split}-{c}-{i:04d}", "label": c, "offset": offset,
                                "length": len(blob), "seed": seed})
                chunks.append(blob)
                offset += len(blob)
        data = b"".join(chunks)
        fname = f"{split}.bin"
        (root / fname).write_bytes(data)
        splits[split] = {"file": fname, "bytes": len(data),
                         "sha256": hashlib.sha256(data).hexdigest(), "samples": records}
    manifest = {
        "format": "gmvit-multiview",
        "version": MANIFEST_VERSION,
        "config": asdict(config),
        "rig": config.rig,
        "N": rig.N,
        "C": config.C,
        "class_names": list(CLASS_NAMES[: config.C]),
        "H": config.H,
        "W": config.W,
        "seed": config.seed,
        "camera_positions": rig.positions.tolist(),
        "splits": splits,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return root


@dataclass
class SplitData:
    name: str
    images: np.ndarray  # (S, N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (S,)
    ids: list[str]
    camera_positions: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def order(self, shuffle_seed: int | None = None) -> np.ndarray:
        idx = np.arange(len(self))
        if shuffle_seed is not None:
            idx = np.random.default_rng(shuffle_seed).permutation(idx)
        return idx

    def __iter__(self) -> Iterator[MultiViewSample]:
        return self.iterate()

    def iterate(self, shuffle_seed: int | None = None) -> Iterator[MultiViewSample]:
        for i in self.order(shuffle_seed):
            yield MultiViewSample(self.images[i], self.camera_positions, int(self.labels[i]), self.ids[i])

    def subset(self, idx) -> SplitData:
        idx = np.asarray(idx)
        return SplitData(self.name, self.images[idx], self.labels[idx], [self.ids[i] for i in idx],
                         self.camera_positions)


@dataclass
class Dataset:
    root: Path
    manifest: dict
    rig: CameraRig
    _splits: dict[str, SplitData] = field(default_factory=dict, repr=False)

    @property
    def N(self) -> int:
        return self.rig.N

    @property
    def C(self) -> int:
        return int(self.manifest["C"])

    @property
    def H(self) -> int:
        return int(self.manifest["H"])

    @property
    def W(self) -> int:
        return int(self.manifest["W"])

    def split(self, name: str) -> SplitData:
        if name not in self._splits:
            self._splits[name] = _read_split(self.root, self.manifest, name)
        return self._splits[name]


def _read_split(root: Path, manifest: dict, name: str) -> SplitData:
    try:
        info = manifest["splits"][name]
    except KeyError:
        raise CorruptDatasetError(f"manifest has no split {name!r}") from None
    path = root / info["file"]
    if not path.exists():
        raise CorruptDatasetError(f"missing blob {path}")
    data = path.read_bytes()
    if len(data) != info["bytes"]:
        raise CorruptDatasetError(f"{path.name}: {len(data)} bytes, manifest says {info['bytes']}")
    if hashlib.sha256(data).hexdigest() != info["sha256"]:
        raise CorruptDatasetError(f"{path.name}: checksum mismatch")
    N, H, W = manifest["N"], manifest["H"], manifest["W"]
    samples = info["samples"]
    images = np.empty((len(samples), N, H, W), dtype=np.float32)
    for k, rec in enumerate(samples):
        blob = data[rec["offset"]: rec["offset"] + rec["length"]]
        if len(blob) != rec["length"]:
            raise CorruptDatasetError(f"record {rec['id']} truncated")
        try:
            arr = serialize.decode(blob)
        except serialize.TensorFormatError as exc:
            raise CorruptDatasetError(f"record {rec['id']}: {exc}") from exc
        if arr.shape != (N, H, W):
            raise CorruptDatasetError(f"record {rec['id']} has shape {arr.shape}, expected {(N, H, W)}")
        images[k] = arr.astype(np.float32) / 255.0
    labels = np.array([rec["label"] for rec in samples], dtype=np.int64)
    cams = np.asarray(manifest["camera_positions"], dtype=np.float64)
    return SplitData(name, images, labels, [rec["id"] for rec in samples], cams)


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CorruptDatasetError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptDatasetError(f"unreadable manifest: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise CorruptDatasetError(f"unsupported manifest version {manifest.get('version')}")
    rig = make_rig(manifest["rig"])
    if rig.N != manifest["N"]:
        raise CorruptDatasetError("manifest view count disagrees with its rig")
    train_ids = {r["id"] for r in manifest["splits"]["train"]["samples"]}
    test_ids = {r["id"] for r in manifest["splits"]["test"]["samples"]}
    if train_ids & test_ids:
        raise CorruptDatasetError("train and test listings overlap")
    return Dataset(root, manifest, rig)
