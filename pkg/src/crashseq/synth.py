"""Deterministic synthetic clip generator.

Clips show anti-aliased colored discs drifting over a dark background.
Accident clips make two discs meet mid-clip, reverse their velocities, and
throw a short radial debris burst; normal clips keep every trajectory smooth
(near misses allowed). Appearance (palette, sizes) is drawn identically for
both classes so motion is the only class signal.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import ClipManifestEntry

BACKGROUND = (40, 40, 40)
PALETTE = (
    (210, 70, 60),
    (70, 130, 210),
    (225, 195, 85),
    (120, 200, 110),
    (190, 110, 200),
    (235, 150, 60),
)
_DEBRIS_COLOR = (245, 245, 245)
_DEBRIS_COUNT = 14
_DEBRIS_FRAMES = 3
_DEBRIS_OFFSET = 0
_DEBRIS_SPEED = (5.0, 9.0)
_DEBRIS_RADIUS = (1.8, 2.6)
_JITTER_MAX = 0.3
_RADIUS_RANGE = (11.0, 17.0)
# Rebound speed fraction after impact. Values near 2/3 make the two or so
# pre-impact steps and the three or so post-impact steps of a bracketing
# 5-frame interval cancel, so the impact pair shows near-zero net motion
# across exactly one default-stride sampling interval.
_REBOUND_RANGE = (0.60, 0.73)
# Collision frames are drawn on this grid/phase so the velocity reversal
# keeps a fixed 2:3 pre/post split within the bracketing interval under the
# default 5-frame sampling stride (40-frame clips -> 8 sampled frames).
_TC_GRID = 5
_TC_PHASE = 1


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    num_clips_per_class: int = 100
    frames_per_clip: int = 40
    image_size: int = 224
    num_blobs: int = 3
    speed_range: tuple = (2.0, 5.0)
    accident_window: tuple = (0.4, 0.7)
    seed: int = 0

    def __post_init__(self):
        if self.num_clips_per_class < 1:
            raise SynthError("num_clips_per_class must be >= 1")
        if self.frames_per_clip < 10:
            raise SynthError(f"frames_per_clip must be >= 10, got {self.frames_per_clip}")
        if self.num_blobs < 1:
            raise SynthError("num_blobs must be >= 1")
        if self.image_size < 32:
            raise SynthError("image_size must be >= 32")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise SynthError(f"bad speed_range {self.speed_range}")
        wlo, whi = self.accident_window
        if not 0.0 <= wlo < whi <= 1.0:
            raise SynthError(f"bad accident_window {self.accident_window}")


def _draw_disc(canvas: np.ndarray, cx: float, cy: float, radius: float, color) -> None:
    """Alpha-blend an anti-aliased disc into the float canvas in place."""
    size = canvas.shape[0]
    x0 = max(int(np.floor(cx - radius - 1)), 0)
    x1 = min(int(np.ceil(cx + radius + 2)), size)
    y0 = max(int(np.floor(cy - radius - 1)), 0)
    y1 = min(int(np.ceil(cy + radius + 2)), size)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dist = np.hypot(xx - cx, yy - cy)
    cov = np.clip(radius + 0.5 - dist, 0.0, 1.0)[:, :, None]
    region = canvas[y0:y1, x0:x1]
    region *= 1.0 - cov
    region += cov * np.asarray(color, dtype=np.float64)


def _in_bounds(p, size: int, margin: float) -> bool:
    return bool(np.all(p >= margin) and np.all(p <= size - margin))


def _sample_linear(rng, size: int, radius: float, speed_range, n_frames: int):
    """Start position and velocity keeping the whole path inside the frame."""
    margin = radius + 4.0
    for _ in range(500):
        speed = rng.uniform(*speed_range)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        v = speed * np.array([np.cos(theta), np.sin(theta)])
        p0 = rng.uniform(margin, size - margin, size=2)
        if _in_bounds(p0 + v * (n_frames - 1), size, margin):
            return p0, v
    return np.array([size / 2.0, size / 2.0]), np.array([speed_range[0], 0.0])


def _sample_collision(rng, cfg: SynthConfig, radii):
    """Collision frame, meeting point, and velocities for the two impact discs."""
    T = cfg.frames_per_clip
    lo = int(np.ceil(cfg.accident_window[0] * T))
    hi = int(np.floor(cfg.accident_window[1] * T)) - _DEBRIS_FRAMES
    if hi < lo:
        raise SynthError("accident_window too narrow for the debris burst")
    candidates = [t for t in range(lo, hi + 1) if t % _TC_GRID == _TC_PHASE]
    if not candidates:  # short clips: the grid can miss the window entirely
        candidates = list(range(lo, hi + 1))
    size = cfg.image_size
    for _ in range(1000):
        t_c = int(rng.choice(candidates))
        p_c = rng.uniform(0.3 * size, 0.7 * size, size=2)
        theta0 = rng.uniform(0.0, 2.0 * np.pi)
        thetas = (theta0, theta0 + np.pi + rng.uniform(-0.5, 0.5))
        ks = rng.uniform(*_REBOUND_RANGE, size=2)
        vels = []
        ok = True
        for j, theta in enumerate(thetas):
            speed = rng.uniform(*cfg.speed_range)
            v = speed * np.array([np.cos(theta), np.sin(theta)])
            margin = radii[j] + 4.0
            p0 = p_c - v * t_c
            p_end = p_c - ks[j] * v * (T - 1 - t_c)
            if not (_in_bounds(p0, size, margin) and _in_bounds(p_end, size, margin)):
                ok = False
                break
            vels.append(v)
        if ok:
            return t_c, p_c, vels, ks
    raise SynthError("could not place a collision inside the frame")


def _jitter(rng) -> np.ndarray:
    mag = rng.uniform(0.0, _JITTER_MAX)
    ang = rng.uniform(0.0, 2.0 * np.pi)
    return mag * np.array([np.cos(ang), np.sin(ang)])


def generate_clip(kind: str, cfg: SynthConfig, clip_seed: int):
    """Render one clip; returns (frames, label) with label 1 for accidents."""
    if kind not in ("normal", "accident"):
        raise SynthError(f"kind must be 'normal' or 'accident', got {kind!r}")
    if kind == "accident" and cfg.num_blobs < 2:
        raise SynthError("accident clips need at least 2 blobs")
    rng = np.random.default_rng(
        np.random.SeedSequence([int(cfg.seed), int(clip_seed),
                                1 if kind == "accident" else 0]))
    T = cfg.frames_per_clip
    size = cfg.image_size
    # appearance constants are calibrated for the default 224-px canvas and
    # scale with it so smaller renders remain placeable
    scale = size / 224.0
    radii = rng.uniform(*_RADIUS_RANGE, size=cfg.num_blobs) * scale
    colors = [PALETTE[j % len(PALETTE)] for j in range(cfg.num_blobs)]

    t_c = -1
    debris = []
    if kind == "accident":
        t_c, p_c, impact_vels, ks = _sample_collision(rng, cfg, radii)
        ang = rng.uniform(0.0, 2.0 * np.pi / _DEBRIS_COUNT)
        for m in range(_DEBRIS_COUNT):
            a = ang + 2.0 * np.pi * m / _DEBRIS_COUNT
            speed = rng.uniform(*_DEBRIS_SPEED) * scale
            debris.append((speed * np.array([np.cos(a), np.sin(a)]),
                           max(1.0, rng.uniform(*_DEBRIS_RADIUS) * scale)))
        positions = [p_c - impact_vels[j] * t_c for j in range(2)]
        velocities = [impact_vels[0], impact_vels[1]]
        for j in range(2, cfg.num_blobs):
            p0, v = _sample_linear(rng, size, radii[j], cfg.speed_range, T)
            positions.append(p0)
            velocities.append(v)
    else:
        positions, velocities = [], []
        for j in range(cfg.num_blobs):
            p0, v = _sample_linear(rng, size, radii[j], cfg.speed_range, T)
            positions.append(p0)
            velocities.append(v)

    positions = [p.copy() for p in positions]
    frames = []
    bg = np.asarray(BACKGROUND, dtype=np.float64)
    for t in range(T):
        canvas = np.tile(bg, (size, size, 1))
        for j in range(cfg.num_blobs):
            _draw_disc(canvas, positions[j][0], positions[j][1], radii[j], colors[j])
        if kind == "accident" and 0 <= t - t_c - _DEBRIS_OFFSET < _DEBRIS_FRAMES:
            for vel, rad in debris:
                p = p_c + vel * (t - t_c)
                _draw_disc(canvas, p[0], p[1], rad, _DEBRIS_COLOR)
        frames.append(np.floor(canvas + 0.5).clip(0, 255).astype(np.uint8))
        for j in range(cfg.num_blobs):
            positions[j] += velocities[j] + _jitter(rng)
        if kind == "accident" and t == t_c:
            velocities[0] = -ks[0] * velocities[0]
            velocities[1] = -ks[1] * velocities[1]
    return frames, (1 if kind == "accident" else 0)


def generate_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Write PPM frame directories plus a stratified 70/30 JSONL manifest."""
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for kind in ("normal", "accident"):
        for i in range(cfg.num_clips_per_class):
            clip_id = f"{kind}_{i:04d}"
            frames, label = generate_clip(kind, cfg, i)
            frame_dir = clips_dir / clip_id
            frame_dir.mkdir(parents=True, exist_ok=True)
            for t, frame in enumerate(frames):
                dataio.write_ppm(frame, frame_dir / f"f{t:05d}.ppm")
            entries.append(ClipManifestEntry(
                clip_id=clip_id, frames_path=str(frame_dir), label=label,
                split="unassigned", num_frames=len(frames)))
    train, _ = dataio.split_dataset(entries, 0.7, cfg.seed)
    train_ids = {e.clip_id for e in train}
    marked = [dataclasses.replace(
        e, split="train" if e.clip_id in train_ids else "test") for e in entries]
    manifest_path = out_dir / "manifest.jsonl"
    dataio.save_manifest(marked, manifest_path)
    return manifest_path
