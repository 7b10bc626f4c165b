"""Manifest parsing, frame-sequence reading, dataset splitting, and the AVFX
binary frame-feature file format shared by every pipeline stage."""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

AVFX_MAGIC = b"AVFX"
AVFX_VERSION = 1
_AVFX_HEADER = struct.Struct("<4sIIII")  # magic, version, reserved, T, D

VALID_SPLITS = ("train", "test", "unassigned")
FRAME_EXTENSIONS = (".png", ".ppm")


class DataError(ValueError):
    """Malformed manifest, frame directory, or feature file."""


@dataclass
class ClipManifestEntry:
    clip_id: str
    frames_path: str
    label: int
    split: str = "unassigned"
    num_frames: int = 2

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if self.split not in VALID_SPLITS:
            raise DataError(f"split must be one of {VALID_SPLITS}, got {self.split!r}")
        if int(self.num_frames) < 2:
            raise DataError(f"num_frames must be >= 2, got {self.num_frames}")


@dataclass
class FeatureSequence:
    """Per-clip T x D matrix of frame features (float32, frame-major)."""

    clip_id: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DataError(f"feature matrix must be T x D with T,D >= 1, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise DataError(f"non-finite values in feature sequence {self.clip_id!r}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def load_manifest(path) -> list[ClipManifestEntry]:
    """Read a JSONL manifest; rejects duplicate clip ids and bad fields."""
    entries: list[ClipManifestEntry] = []
    seen: set[str] = set()
    required = {"clip_id", "frames_path", "label", "split", "num_frames"}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            missing = required - obj.keys()
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            unknown = obj.keys() - required
            if unknown:
                raise DataError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            try:
                entry = ClipManifestEntry(**obj)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if entry.clip_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate clip_id {entry.clip_id!r}")
            seen.add(entry.clip_id)
            entries.append(entry)
    return entries


def save_manifest(entries, path) -> None:
    """Write entries as JSONL; inverse of load_manifest."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(asdict(entry)) + "\n")
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    """Write text via a temp file + rename so failures never leave partial output."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def read_frame_sequence(dir_path) -> list[np.ndarray]:
    """Decode all frame images in a directory, lexicographic order = time order.

    Returns a list of H x W x 3 uint8 RGB arrays; all frames must share one
    resolution.
    """
    dir_path = Path(dir_path)
    names = sorted(p.name for p in dir_path.iterdir()
                   if p.suffix.lower() in FRAME_EXTENSIONS)
    if not names:
        raise DataError(f"no frame images (*.png, *.ppm) in {dir_path}")
    frames = []
    for name in names:
        try:
            with Image.open(dir_path / name) as img:
                frames.append(np.asarray(img.convert("RGB"), dtype=np.uint8))
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"cannot decode frame {dir_path / name}: {exc}") from exc
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DataError(f"mixed frame resolutions in {dir_path}: {sorted(shapes)}")
    return frames


def write_ppm(img: np.ndarray, path) -> None:
    """Write an H x W x 3 uint8 array as binary PPM (P6, maxval 255)."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_png(img: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def write_feature_file(seq: FeatureSequence, path) -> None:
    """Serialize a FeatureSequence to the AVFX layout (bit-exact round trip)."""
    data = np.ascontiguousarray(seq.data, dtype="<f4")
    if not np.isfinite(data).all():
        raise DataError(f"refusing to write non-finite features for {seq.clip_id!r}")
    t, d = data.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_AVFX_HEADER.pack(AVFX_MAGIC, AVFX_VERSION, 0, t, d))
        fh.write(data.tobytes())
    os.replace(tmp, path)


def read_feature_file(path, clip_id: str | None = None) -> FeatureSequence:
    """Parse an AVFX file; trailing bytes beyond the declared payload are ignored."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_AVFX_HEADER.size)
        if len(header) < _AVFX_HEADER.size:
            raise DataError(f"{path}: truncated header ({len(header)} bytes)")
        magic, version, _reserved, t, d = _AVFX_HEADER.unpack(header)
        if magic != AVFX_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        if version != AVFX_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        if t < 1 or d < 1:
            raise DataError(f"{path}: invalid dims T={t}, D={d}")
        payload = fh.read(t * d * 4)
    if len(payload) < t * d * 4:
        raise DataError(
            f"{path}: truncated payload, expected {t * d * 4} bytes got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(t, d).copy()
    if clip_id is None:
        clip_id = path.name.split(".")[0]
    return FeatureSequence(clip_id=clip_id, data=data)


def split_dataset(entries, train_fraction: float, seed: int):
    """Deterministic stratified split into (train, test); both keep manifest order."""
    if not entries:
        raise DataError("cannot split an empty entry list")
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_label = {0: [], 1: []}
    for idx, entry in enumerate(entries):
        by_label[entry.label].append(idx)
    train_idx: set[int] = set()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5917]))
    for label in (0, 1):
        idxs = by_label[label]
        if not idxs:
            warnings.warn(f"label {label} has no entries; split is not stratified")
            continue
        n_train = int(np.floor(train_fraction * len(idxs) + 0.5))
        order = rng.permutation(len(idxs))
        train_idx.update(idxs[i] for i in order[:n_train])
    train = [e for i, e in enumerate(entries) if i in train_idx]
    test = [e for i, e in enumerate(entries) if i not in train_idx]
    return train, test
