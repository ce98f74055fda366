"""In-memory frame sets and their on-disk layout.

Layout under a dataset root::

    manifest.json          versioned, human-readable, carries per-file sha256
    labels.csv             frame file, sequence, index, split, x y z w xi yj zk, timestamp
    frames/*.png           one lossless 8-bit RGB raster per frame
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .. import geometry as geo
from .render import Frame, SatelliteModel, default_satellite, render_frame
from .trajectory import PoseLabel, TrajectorySpec, expand_trajectory

MANIFEST_VERSION = 1
LABEL_COLUMNS = ["file", "sequence", "index", "split", "x", "y", "z", "w", "xi", "yj", "zk", "timestamp"]


class DatasetError(RuntimeError):
    pass


class ChecksumError(DatasetError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class FrameSet:
    """Column-oriented collection of labelled frames (images kept as uint8)."""

    images: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray
    sequence_ids: np.ndarray
    frame_indices: np.ndarray
    timestamps: np.ndarray
    splits: np.ndarray

    def __post_init__(self):
        n = len(self.images)
        for name in ("positions", "quaternions", "sequence_ids", "frame_indices", "timestamps", "splits"):
            if len(getattr(self, name)) != n:
                raise DatasetError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:3])

    @classmethod
    def from_frames(cls, frames: Sequence[Frame], splits: Optional[Sequence[str]] = None) -> "FrameSet":
        n = len(frames)
        return cls(
            images=np.stack([np.round(f.image * 255).astype(np.uint8) for f in frames]),
            positions=np.stack([f.label.position for f in frames]),
            quaternions=np.stack([f.label.quaternion for f in frames]),
            sequence_ids=np.array([f.sequence_id for f in frames], dtype=np.int64),
            frame_indices=np.array([f.frame_index for f in frames], dtype=np.int64),
            timestamps=np.array([np.nan if f.timestamp is None else f.timestamp for f in frames]),
            splits=np.array(list(splits) if splits is not None else ["train"] * n),
        )

    def subset(self, idx) -> "FrameSet":
        idx = np.asarray(idx, dtype=np.intp)
        return FrameSet(self.images[idx], self.positions[idx], self.quaternions[idx], self.sequence_ids[idx],
                        self.frame_indices[idx], self.timestamps[idx], self.splits[idx])

    def split(self, name: str) -> "FrameSet":
        return self.subset(np.flatnonzero(self.splits == name))

    def label(self, i: int) -> PoseLabel:
        return PoseLabel(self.positions[i], self.quaternions[i])

    def frame(self, i: int) -> Frame:
        ts = None if np.isnan(self.timestamps[i]) else float(self.timestamps[i])
        return Frame(self.images[i] / 255.0, self.label(i), int(self.frame_indices[i]), ts, int(self.sequence_ids[i]))

    def batch(self, idx, dtype=np.float64) -> np.ndarray:
        """Images ``idx`` as an NCHW float array in [0, 1]."""
        return (self.images[np.asarray(idx)].astype(dtype) / 255.0).transpose(0, 3, 1, 2)

    @staticmethod
    def concat(sets: Iterable["FrameSet"]) -> "FrameSet":
        sets = list(sets)
        return FrameSet(*[np.concatenate([getattr(s, f) for s in sets]) for f in
                          ("images", "positions", "quaternions", "sequence_ids", "frame_indices", "timestamps", "splits")])


def assign_split(n: int, train_fraction: float, seed: int) -> np.ndarray:
    """Exactly ``round(n * train_fraction)`` frames go to train, chosen by a seeded permutation."""
    n_train = int(round(n * train_fraction))
    perm = np.random.default_rng(seed).permutation(n)
    out = np.full(n, "test", dtype="<U5")
    out[perm[:n_train]] = "train"
    return out


def render_sequences(specs: Sequence[TrajectorySpec], K: geo.CameraIntrinsics, size=(90, 120),
                     model: Optional[SatelliteModel] = None, light_dir=(0.3, -0.4, -1.0),
                     frame_stride: int = 1, frame_offset: int = 0, fps: float = 30.0) -> FrameSet:
    """Render every ``frame_stride``-th frame of each trajectory (all assigned to train)."""
    model = model or default_satellite()
    frames = []
    for spec in specs:
        labels = expand_trajectory(spec)
        for k in range(frame_offset, len(labels), frame_stride):
            f = render_frame(model, labels[k], K, light_dir, size, frame_index=k, timestamp=k / fps)
            f.sequence_id = spec.sequence_id
            frames.append(f)
    return FrameSet.from_frames(frames)


@dataclass
class DatasetManifest:
    image_size: tuple
    global_seed: int
    trajectories: list = field(default_factory=list)
    split_fractions: dict = field(default_factory=lambda: {"train": 0.8, "test": 0.2})
    intrinsics: Optional[dict] = None
    frames: list = field(default_factory=list)
    labels_sha256: str = ""
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        if abs(sum(self.split_fractions.values()) - 1.0) > 1e-9:
            raise DatasetError("split fractions must sum to 1")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "image_size": list(self.image_size),
            "global_seed": self.global_seed,
            "split_fractions": self.split_fractions,
            "intrinsics": self.intrinsics,
            "trajectories": self.trajectories,
            "labels_sha256": self.labels_sha256,
            "frames": self.frames,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"manifest version {d.get('version')} unsupported (expected {MANIFEST_VERSION})")
        return cls(tuple(d["image_size"]), d["global_seed"], d["trajectories"], d["split_fractions"],
                   d.get("intrinsics"), d["frames"], d["labels_sha256"], d["version"])

    @property
    def digest(self) -> str:
        return canonical_hash(self.to_dict())


def _frame_name(seq: int, idx: int) -> str:
    return f"frames/s{seq:03d}_{idx:06d}.png"


def write_dataset(frames: FrameSet, manifest: DatasetManifest, root) -> DatasetManifest:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    rows = []
    for i in range(len(frames)):
        name = _frame_name(int(frames.sequence_ids[i]), int(frames.frame_indices[i]))
        path = root / name
        Image.fromarray(frames.images[i], mode="RGB").save(path, format="PNG", optimize=False)
        entries.append({"file": name, "sha256": sha256_file(path), "split": str(frames.splits[i])})
        ts = frames.timestamps[i]
        rows.append([name, int(frames.sequence_ids[i]), int(frames.frame_indices[i]), str(frames.splits[i]),
                     *[repr(float(v)) for v in frames.positions[i]], *[repr(float(v)) for v in frames.quaternions[i]],
                     "" if np.isnan(ts) else repr(float(ts))])
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_COLUMNS)
        w.writerows(rows)
    manifest.frames = entries
    manifest.image_size = tuple(frames.image_size)
    manifest.labels_sha256 = sha256_file(root / "labels.csv")
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(root, verify: bool = True) -> tuple[FrameSet, DatasetManifest]:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"missing manifest: {mpath}")
    manifest = DatasetManifest.from_dict(json.loads(mpath.read_text()))
    lpath = root / "labels.csv"
    if not lpath.exists():
        raise DatasetError(f"missing label file: {lpath}")
    if verify and sha256_file(lpath) != manifest.labels_sha256:
        raise ChecksumError(f"checksum mismatch for {lpath}")
    with open(lpath, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != len(manifest.frames):
        raise DatasetError("label rows do not match manifest frame list")
    h, w = manifest.image_size
    images = np.empty((len(rows), h, w, 3), dtype=np.uint8)
    for i, entry in enumerate(manifest.frames):
        path = root / entry["file"]
        if not path.exists():
            raise DatasetError(f"missing frame file: {path}")
        if verify and sha256_file(path) != entry["sha256"]:
            raise ChecksumError(f"checksum mismatch for {path}")
        images[i] = np.asarray(Image.open(path).convert("RGB"))
    frames = FrameSet(
        images=images,
        positions=np.array([[float(r[k]) for k in ("x", "y", "z")] for r in rows]),
        quaternions=np.array([[float(r[k]) for k in ("w", "xi", "yj", "zk")] for r in rows]),
        sequence_ids=np.array([int(r["sequence"]) for r in rows], dtype=np.int64),
        frame_indices=np.array([int(r["index"]) for r in rows], dtype=np.int64),
        timestamps=np.array([float(r["timestamp"]) if r["timestamp"] else np.nan for r in rows]),
        splits=np.array([r["split"] for r in rows]),
    )
    return frames, manifest


def plan_manifest(specs: Sequence[TrajectorySpec], image_size, seed: int, train_fraction: float = 0.8,
                  intrinsics: Optional[geo.CameraIntrinsics] = None, frame_stride: int = 1) -> DatasetManifest:
    """Manifest skeleton (frame list and split) for ``specs`` before any rendering."""
    entries = []
    for spec in specs:
        for k in range(0, spec.frame_count, frame_stride):
            entries.append({"file": _frame_name(spec.sequence_id, k), "sha256": "", "split": ""})
    splits = assign_split(len(entries), train_fraction, seed)
    for e, s in zip(entries, splits):
        e["split"] = str(s)
    return DatasetManifest(
        image_size=tuple(image_size), global_seed=seed, trajectories=[s.to_dict() for s in specs],
        split_fractions={"train": train_fraction, "test": round(1.0 - train_fraction, 12)},
        intrinsics=None if intrinsics is None else {"fx": intrinsics.fx, "fy": intrinsics.fy,
                                                    "cx": intrinsics.cx, "cy": intrinsics.cy},
        frames=entries)
