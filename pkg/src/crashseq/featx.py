"""Frame sampling, preprocessing, the built-in feature extractor, and
assembly of the four input modalities (rgb, flow, overlay, rgb_concat_flow)
into per-clip feature sequences.

The built-in extractor is a fixed random-projection CNN: four [3x3 conv,
stride 2, ReLU] blocks with seeded He-initialized weights and global average
pooling to a 64-d vector per frame. It is untrained by design, which keeps
the pipeline self-contained and bit-deterministic; strong pretrained features
arrive through AVFX files instead.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import dataio
from .dataio import FeatureSequence
from .optflow import FlowParams, flow_sequence, flow_to_color, overlay

MODALITIES = ("rgb", "flow", "overlay", "rgb_concat_flow")

BUILTIN_FEATURE_DIM = 64
_BUILTIN_CHANNELS = (3, 8, 16, 32, 64)

# Reference magnitude (px per sampled-frame interval) mapping flow to full
# saturation. A fixed value keeps renderings comparable across clips and is
# robust to isolated solver spikes, which simply clip at saturation 1.
FLOW_RENDER_MAG = 8.0


class FeatureError(ValueError):
    pass


@dataclass
class PreprocConfig:
    target_size: int = 224
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)
    frame_stride: int = 5

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise FeatureError(f"std components must be positive, got {self.std}")
        if self.frame_stride < 1:
            raise FeatureError(f"frame_stride must be >= 1, got {self.frame_stride}")


@dataclass
class ModalitySpec:
    kind: str = "rgb"
    blend: float = 0.5
    flow_params: FlowParams = field(default_factory=FlowParams)

    def __post_init__(self):
        if self.kind not in MODALITIES:
            raise FeatureError(f"unknown modality {self.kind!r}, expected one of {MODALITIES}")


def sample_frames(frames, stride: int):
    """Keep frames at indices 0, stride, 2*stride, ..."""
    if stride < 1:
        raise FeatureError(f"stride must be >= 1, got {stride}")
    return list(frames[::stride])


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centered mapping; round-half-up to uint8."""
    img = np.asarray(img, dtype=np.uint8)
    if img.shape[:2] == (h, w):
        return img.copy()
    src_h, src_w = img.shape[:2]
    ys = (np.arange(h) + 0.5) * (src_h / h) - 0.5
    xs = (np.arange(w) + 0.5) * (src_w / w) - 0.5
    y0 = np.clip(np.floor(ys), 0, src_h - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, src_w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    f = img.astype(np.float64)
    top = f[np.ix_(y0, x0)] * (1 - wx) + f[np.ix_(y0, x1)] * wx
    bot = f[np.ix_(y1, x0)] * (1 - wx) + f[np.ix_(y1, x1)] * wx
    out = top * (1 - wy) + bot * wy
    return np.floor(out + 0.5).clip(0, 255).astype(np.uint8)


def normalize(img: np.ndarray, cfg: PreprocConfig) -> np.ndarray:
    """Scale to [0,1] and standardize per channel; returns float32 H x W x 3."""
    x = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    mean = np.asarray(cfg.mean, dtype=np.float32)
    std = np.asarray(cfg.std, dtype=np.float32)
    return (x - mean) / std


class BuiltinExtractor:
    """Seeded random-projection CNN; weights are immutable after construction."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xFEA7]))
        self.weights = []
        for c_in, c_out in zip(_BUILTIN_CHANNELS[:-1], _BUILTIN_CHANNELS[1:]):
            fan_in = c_in * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3))
            self.weights.append(w.astype(np.float32))

    def frame_features(self, frame: np.ndarray) -> np.ndarray:
        x = np.asarray(frame, dtype=np.float32)
        if x.ndim != 3 or x.shape[2] != 3:
            raise FeatureError(f"expected H x W x 3 input, got shape {x.shape}")
        if min(x.shape[:2]) < 16:
            raise FeatureError(f"input too small for 4 stride-2 blocks: {x.shape}")
        for w in self.weights:
            padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
            patches = sliding_window_view(padded, (3, 3), axis=(0, 1))[::2, ::2]
            ho, wo = patches.shape[:2]
            flat = patches.reshape(ho * wo, -1)  # (N, C_in*9), (C, kh, kw) order
            out = flat @ w.reshape(w.shape[0], -1).T
            x = np.maximum(out, 0.0, dtype=np.float32).reshape(ho, wo, w.shape[0])
        return x.mean(axis=(0, 1), dtype=np.float32)

    def features(self, frames) -> np.ndarray:
        return np.stack([self.frame_features(f) for f in frames])


@functools.lru_cache(maxsize=8)
def _extractor(seed: int) -> BuiltinExtractor:
    return BuiltinExtractor(seed)


def extract_features_builtin(frames, seed: int, clip_id: str = "") -> FeatureSequence:
    """Feature sequence of preprocessed frames; bit-identical for a given seed."""
    if not frames:
        raise FeatureError("no frames to extract features from")
    return FeatureSequence(clip_id=clip_id, data=_extractor(int(seed)).features(frames))


def _stream_path(features_dir, clip_id: str, stream: str) -> Path:
    return Path(features_dir) / f"{clip_id}.{stream}.avfx"


def _load_stream(features_dir, clip_id: str, stream: str) -> FeatureSequence:
    path = _stream_path(features_dir, clip_id, stream)
    if not path.exists():
        raise FeatureError(f"missing feature file {path}")
    return dataio.read_feature_file(path, clip_id=clip_id)


def _concat_streams(rgb: FeatureSequence, flow: FeatureSequence) -> FeatureSequence:
    common = min(rgb.num_frames, flow.num_frames)
    if common < 1:
        raise FeatureError(f"zero common length for clip {rgb.clip_id!r}")
    data = np.hstack([rgb.data[:common], flow.data[:common]])
    return FeatureSequence(clip_id=rgb.clip_id, data=data)


def _preprocess(frame: np.ndarray, cfg: PreprocConfig) -> np.ndarray:
    return normalize(resize_bilinear(frame, cfg.target_size, cfg.target_size), cfg)


def clip_streams(sampled_frames, spec: ModalitySpec, cfg: PreprocConfig, seed: int,
                 clip_id: str, streams) -> dict[str, FeatureSequence]:
    """Compute the requested per-frame feature streams for one sampled clip."""
    out: dict[str, FeatureSequence] = {}
    flow_colors = None
    if {"flow", "overlay"} & set(streams):
        if len(sampled_frames) < 2:
            raise FeatureError(
                f"clip {clip_id!r}: flow needs >= 2 sampled frames, got {len(sampled_frames)}")
        fields = flow_sequence(sampled_frames, spec.flow_params)
        flow_colors = [flow_to_color(f, FLOW_RENDER_MAG) for f in fields]
    for stream in streams:
        if stream == "rgb":
            imgs = sampled_frames
        elif stream == "flow":
            imgs = flow_colors
        elif stream == "overlay":
            imgs = [overlay(sampled_frames[t], flow_colors[t], spec.blend)
                    for t in range(len(flow_colors))]
        else:
            raise FeatureError(f"unknown stream {stream!r}")
        tensors = [_preprocess(img, cfg) for img in imgs]
        out[stream] = extract_features_builtin(tensors, seed, clip_id=clip_id)
    return out


def assemble_modality(entry, spec: ModalitySpec, cfg: PreprocConfig,
                      features_dir=None, seed: int = 0) -> FeatureSequence:
    """Build one clip's model input for the requested modality.

    With features_dir the per-frame features come from <clip_id>.<stream>.avfx
    files; otherwise frames are read, stride-sampled, and run through the
    built-in extractor.
    """
    if features_dir is not None:
        if spec.kind == "rgb_concat_flow":
            return _concat_streams(_load_stream(features_dir, entry.clip_id, "rgb"),
                                   _load_stream(features_dir, entry.clip_id, "flow"))
        return _load_stream(features_dir, entry.clip_id, spec.kind)

    frames = dataio.read_frame_sequence(entry.frames_path)
    sampled = sample_frames(frames, cfg.frame_stride)
    if spec.kind == "rgb_concat_flow":
        streams = clip_streams(sampled, spec, cfg, seed, entry.clip_id, ("rgb", "flow"))
        return _concat_streams(streams["rgb"], streams["flow"])
    return clip_streams(sampled, spec, cfg, seed, entry.clip_id, (spec.kind,))[spec.kind]
