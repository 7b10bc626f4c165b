"""Dense optical flow between consecutive frames plus flow rendering.

The solver is Horn-Schunck: a quadratic data + smoothness objective whose
Jacobi iteration is

    u <- ubar - Ix * (Ix*ubar + Iy*vbar + It) / (alpha^2 + Ix^2 + Iy^2)

(and symmetrically for v), where ubar/vbar are 3x3 neighborhood means
excluding the center. It runs coarse-to-fine over a small image pyramid so
shifts of a few pixels stay inside the linearization range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])  # Rec. 601 luma


class FlowError(ValueError):
    pass


@dataclass
class FlowParams:
    alpha: float = 1.0
    iterations: int = 100
    levels: int = 3

    def __post_init__(self):
        if self.alpha <= 0:
            raise FlowError(f"alpha must be positive, got {self.alpha}")
        if self.iterations < 1 or self.levels < 1:
            raise FlowError("iterations and levels must be >= 1")


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise FlowError(f"u/v must be equal-shape 2-D, got {self.u.shape} vs {self.v.shape}")

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def grayscale(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an H x W x 3 RGB image, real-valued in [0, 255]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FlowError(f"expected H x W x 3 image, got shape {img.shape}")
    return img.astype(np.float64) @ GRAY_WEIGHTS


def _neighbor_mean(x: np.ndarray) -> np.ndarray:
    # 3x3 mean excluding the center, border replicated
    return (ndimage.uniform_filter(x, size=3, mode="nearest") * 9.0 - x) / 8.0


def _central_diff(img: np.ndarray, axis: int) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    if axis == 0:
        return (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0


def _box2(x: np.ndarray) -> np.ndarray:
    # mean over the 2x2 stencil at offsets {0,1}^2, bottom/right edge replicated
    p = np.pad(x, ((0, 1), (0, 1)), mode="edge")
    return (p[:-1, :-1] + p[1:, :-1] + p[:-1, 1:] + p[1:, 1:]) / 4.0


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
        h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def resize_field(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a 2-D real field with half-pixel-centered mapping."""
    src_h, src_w = x.shape
    if (src_h, src_w) == (h, w):
        return x.copy()
    ys = (np.arange(h) + 0.5) * (src_h / h) - 0.5
    xs = (np.arange(w) + 0.5) * (src_w / w) - 0.5
    y0 = np.clip(np.floor(ys), 0, src_h - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, src_w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = x[np.ix_(y0, x0)] * (1 - wx) + x[np.ix_(y0, x1)] * wx
    bot = x[np.ix_(y1, x0)] * (1 - wx) + x[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def horn_schunck(i1: np.ndarray, i2: np.ndarray, params: FlowParams | None = None) -> FlowField:
    """Coarse-to-fine Horn-Schunck flow between two grayscale images."""
    params = params or FlowParams()
    i1 = np.asarray(i1, dtype=np.float64)
    i2 = np.asarray(i2, dtype=np.float64)
    if i1.shape != i2.shape or i1.ndim != 2:
        raise FlowError(f"frame shapes differ: {i1.shape} vs {i2.shape}")
    i1 = i1 / 255.0
    i2 = i2 / 255.0

    pyramid = [(i1, i2)]
    for _ in range(params.levels - 1):
        a, b = pyramid[-1]
        if min(a.shape) < 8:  # stop before structure vanishes
            break
        pyramid.append((_downsample2(a), _downsample2(b)))

    # alpha is expressed in 8-bit intensity units; images run in [0,1], so
    # rescale alpha identically (the update is invariant under joint scaling)
    alpha2 = (params.alpha / 255.0) ** 2
    u = np.zeros_like(pyramid[-1][0])
    v = np.zeros_like(u)
    for level in range(len(pyramid) - 1, -1, -1):
        a, b = pyramid[level]
        if u.shape != a.shape:
            u = resize_field(u, *a.shape) * 2.0
            v = resize_field(v, *a.shape) * 2.0
        ix = (_central_diff(a, 1) + _central_diff(b, 1)) / 2.0
        iy = (_central_diff(a, 0) + _central_diff(b, 0)) / 2.0
        it = _box2(b - a)
        denom = alpha2 + ix * ix + iy * iy
        for _ in range(params.iterations):
            ubar = _neighbor_mean(u)
            vbar = _neighbor_mean(v)
            t = (ix * ubar + iy * vbar + it) / denom
            u = ubar - ix * t
            v = vbar - iy * t
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise FlowError("non-finite flow values; numeric bug in the solver")
    return FlowField(u=u, v=v)


def flow_to_color(flow: FlowField, max_mag: float = 0.0) -> np.ndarray:
    """Render a flow field on an HSV wheel: hue = direction, saturation =
    magnitude / max_mag, value = 1 (zero motion maps to white)."""
    if max_mag < 0:
        raise FlowError(f"max_mag must be >= 0, got {max_mag}")
    mag = flow.magnitude()
    if max_mag == 0.0:
        max_mag = max(float(mag.max()), 1e-6)
    hue = np.degrees(np.arctan2(flow.v, flow.u)) % 360.0
    sat = np.minimum(mag / max_mag, 1.0)
    # inline HSV -> RGB with V=1
    hp = hue / 60.0
    x = 1.0 - np.abs(hp % 2.0 - 1.0)
    sector = np.floor(hp).astype(np.intp) % 6
    zeros = np.zeros_like(hue)
    ones = np.ones_like(hue)
    r = np.choose(sector, [ones, x, zeros, zeros, x, ones])
    g = np.choose(sector, [x, ones, ones, x, zeros, zeros])
    b = np.choose(sector, [zeros, zeros, x, ones, ones, x])
    rgb = np.stack([r, g, b], axis=-1)
    rgb = (1.0 - sat[..., None]) + sat[..., None] * rgb  # desaturate toward white
    return np.floor(rgb * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def overlay(frame: np.ndarray, flow_img: np.ndarray, blend: float) -> np.ndarray:
    """Blend a flow rendering onto its source frame: (1-blend)*frame + blend*flow."""
    if not 0.0 <= blend <= 1.0:
        raise FlowError(f"blend must be in [0, 1], got {blend}")
    frame = np.asarray(frame)
    flow_img = np.asarray(flow_img)
    if frame.shape != flow_img.shape:
        raise FlowError(f"shape mismatch: {frame.shape} vs {flow_img.shape}")
    mixed = (1.0 - blend) * frame.astype(np.float64) + blend * flow_img.astype(np.float64)
    return np.floor(mixed + 0.5).clip(0, 255).astype(np.uint8)


def flow_sequence(frames, params: FlowParams | None = None) -> list[FlowField]:
    """Pairwise flow over T frames; element t maps frame t to frame t+1."""
    if len(frames) < 2:
        raise FlowError(f"need at least 2 frames, got {len(frames)}")
    grays = [grayscale(f) for f in frames]
    return [horn_schunck(grays[t], grays[t + 1], params) for t in range(len(grays) - 1)]
