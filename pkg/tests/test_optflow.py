import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from crashseq import optflow
from crashseq.optflow import (
    FlowError,
    FlowField,
    FlowParams,
    flow_sequence,
    flow_to_color,
    grayscale,
    horn_schunck,
    overlay,
    resize_field,
)


def _smooth_texture(rng, h, w, sigma=6.0):
    """Band-limited random image in [0, 255]; flow needs gradients everywhere."""
    x = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    x = (x - x.min()) / (x.max() - x.min() + 1e-12)
    return 255.0 * x


# ---------------------------------------------------------------- grayscale

def test_grayscale_pure_red():
    img = np.zeros((4, 5, 3), dtype=np.uint8)
    img[..., 0] = 255
    gray = grayscale(img)
    assert gray.shape == (4, 5)
    assert np.allclose(gray, 76.245)


def test_grayscale_white_is_255():
    img = np.full((3, 3, 3), 255, dtype=np.uint8)
    assert np.allclose(grayscale(img), 255.0)


def test_grayscale_weights_sum_to_one():
    assert abs(optflow.GRAY_WEIGHTS.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("shape", [(4, 4), (4, 4, 4), (3,)])
def test_grayscale_rejects_bad_shapes(shape):
    with pytest.raises(FlowError):
        grayscale(np.zeros(shape))


# ---------------------------------------------------------------- params / fields

def test_flow_params_validation():
    with pytest.raises(FlowError):
        FlowParams(alpha=0.0)
    with pytest.raises(FlowError):
        FlowParams(iterations=0)
    with pytest.raises(FlowError):
        FlowParams(levels=0)
    p = FlowParams()
    assert (p.alpha, p.iterations, p.levels) == (1.0, 100, 3)


def test_flow_field_shape_mismatch():
    with pytest.raises(FlowError):
        FlowField(u=np.zeros((2, 3)), v=np.zeros((3, 2)))
    with pytest.raises(FlowError):
        FlowField(u=np.zeros(4), v=np.zeros(4))


def test_flow_field_magnitude():
    f = FlowField(u=np.full((2, 2), 3.0), v=np.full((2, 2), 4.0))
    assert np.allclose(f.magnitude(), 5.0)


# ---------------------------------------------------------------- resize

def test_resize_identity_returns_copy():
    x = np.arange(12.0).reshape(3, 4)
    y = resize_field(x, 3, 4)
    assert np.array_equal(x, y)
    y[0, 0] = -1.0
    assert x[0, 0] == 0.0


def test_resize_constant_stays_constant():
    x = np.full((5, 7), 2.5)
    assert np.allclose(resize_field(x, 11, 13), 2.5)
    assert np.allclose(resize_field(x, 2, 3), 2.5)


def test_resize_tracks_linear_ramp():
    # bilinear interpolation reproduces an axis-aligned ramp away from borders
    x = np.tile(np.arange(16.0), (16, 1))
    y = resize_field(x, 32, 32)
    interior = y[4:-4, 4:-4]
    cols = (np.arange(32) + 0.5) * 0.5 - 0.5
    assert np.allclose(interior, np.tile(cols, (32, 1))[4:-4, 4:-4], atol=1e-9)


@given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 17), st.integers(1, 17))
@settings(max_examples=40, deadline=None)
def test_resize_respects_range(h, w, nh, nw):
    rng = np.random.default_rng(h * 1000 + w * 100 + nh * 10 + nw)
    x = rng.uniform(-5.0, 5.0, size=(h, w))
    y = resize_field(x, nh, nw)
    assert y.shape == (nh, nw)
    assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12


# ---------------------------------------------------------------- solver

def test_identical_frames_give_exact_zero():
    rng = np.random.default_rng(0)
    img = _smooth_texture(rng, 48, 48)
    flow = horn_schunck(img, img.copy())
    assert flow.u.shape == (48, 48)
    assert np.all(flow.u == 0.0)
    assert np.all(flow.v == 0.0)


def test_recovers_one_pixel_shift():
    rng = np.random.default_rng(1)
    img = _smooth_texture(rng, 64, 64)
    shifted = np.roll(img, 1, axis=1)  # content moves +1 px along x
    flow = horn_schunck(img, shifted)
    inner = np.s_[8:-8, 8:-8]
    epe = np.hypot(flow.u[inner] - 1.0, flow.v[inner]).mean()
    assert epe < 0.5


def test_recovers_two_pixel_shift_via_pyramid():
    rng = np.random.default_rng(2)
    img = _smooth_texture(rng, 64, 64)
    shifted = np.roll(img, 2, axis=0)  # +2 px along y
    flow = horn_schunck(img, shifted)
    inner = np.s_[8:-8, 8:-8]
    epe = np.hypot(flow.u[inner], flow.v[inner] - 2.0).mean()
    assert epe < 0.5


def test_shape_mismatch_raises():
    with pytest.raises(FlowError):
        horn_schunck(np.zeros((8, 8)), np.zeros((8, 9)))


def test_tiny_image_stops_pyramid_early():
    # 8x8 at 5 levels would shrink below the structure floor; must not crash
    rng = np.random.default_rng(3)
    img = _smooth_texture(rng, 8, 8, sigma=1.0)
    flow = horn_schunck(img, np.roll(img, 1, axis=1), FlowParams(levels=5))
    assert flow.u.shape == (8, 8)


def test_solver_is_deterministic():
    rng = np.random.default_rng(4)
    a = _smooth_texture(rng, 32, 32)
    b = np.roll(a, 1, axis=1)
    f1 = horn_schunck(a, b)
    f2 = horn_schunck(a, b)
    assert np.array_equal(f1.u, f2.u) and np.array_equal(f1.v, f2.v)


def test_higher_alpha_smooths_the_field():
    """The smoothness weight should reduce spatial variance of the estimate."""
    rng = np.random.default_rng(5)
    img = _smooth_texture(rng, 48, 48)
    shifted = np.roll(img, 1, axis=1)
    rough = horn_schunck(img, shifted, FlowParams(alpha=0.5))
    smooth = horn_schunck(img, shifted, FlowParams(alpha=8.0))
    assert np.var(smooth.u) < np.var(rough.u)


# ---------------------------------------------------------------- rendering

def test_zero_flow_renders_white():
    f = FlowField(u=np.zeros((3, 3)), v=np.zeros((3, 3)))
    img = flow_to_color(f, max_mag=1.0)
    assert img.dtype == np.uint8
    assert np.all(img == 255)


def test_upward_flow_color():
    # (u, v) = (0, max) sits 90 degrees round the wheel: mid red, full green
    f = FlowField(u=np.zeros((2, 2)), v=np.ones((2, 2)))
    img = flow_to_color(f, max_mag=1.0)
    expect = np.array([128, 255, 0])
    assert np.all(np.abs(img.astype(int) - expect) <= 1)


def test_rightward_flow_is_red():
    f = FlowField(u=np.ones((2, 2)), v=np.zeros((2, 2)))
    img = flow_to_color(f, max_mag=1.0)
    assert np.all(img == np.array([255, 0, 0], dtype=np.uint8))


def test_saturation_clips_beyond_reference():
    fast = flow_to_color(FlowField(u=np.full((2, 2), 9.0), v=np.zeros((2, 2))), 1.0)
    unit = flow_to_color(FlowField(u=np.ones((2, 2)), v=np.zeros((2, 2))), 1.0)
    assert np.array_equal(fast, unit)


def test_default_reference_is_field_max():
    f = FlowField(u=np.array([[0.0, 4.0]]), v=np.zeros((1, 2)))
    auto = flow_to_color(f)
    fixed = flow_to_color(f, max_mag=4.0)
    assert np.array_equal(auto, fixed)


def test_negative_reference_rejected():
    f = FlowField(u=np.zeros((2, 2)), v=np.zeros((2, 2)))
    with pytest.raises(FlowError):
        flow_to_color(f, max_mag=-1.0)


@given(st.integers(0, 359), st.floats(0.0, 1.0, allow_nan=False))
@settings(max_examples=60, deadline=None)
def test_render_matches_reference_hsv(angle_deg, frac):
    """Pixel colors agree with a straightforward colorsys conversion."""
    import colorsys

    theta = np.radians(angle_deg)
    f = FlowField(u=np.array([[frac * np.cos(theta)]]),
                  v=np.array([[frac * np.sin(theta)]]))
    got = flow_to_color(f, max_mag=1.0)[0, 0]
    r, g, b = colorsys.hsv_to_rgb(angle_deg / 360.0, min(frac, 1.0), 1.0)
    expect = np.floor(np.array([r, g, b]) * 255.0 + 0.5)
    assert np.all(np.abs(got.astype(float) - expect) <= 1.0)


def test_overlay_midpoint_blend():
    frame = np.full((2, 2, 3), 100, dtype=np.uint8)
    flow_img = np.full((2, 2, 3), 200, dtype=np.uint8)
    assert np.all(overlay(frame, flow_img, 0.5) == 150)


def test_overlay_endpoints():
    rng = np.random.default_rng(6)
    frame = rng.integers(0, 256, size=(4, 4, 3), dtype=np.uint8)
    flow_img = rng.integers(0, 256, size=(4, 4, 3), dtype=np.uint8)
    assert np.array_equal(overlay(frame, flow_img, 0.0), frame)
    assert np.array_equal(overlay(frame, flow_img, 1.0), flow_img)


def test_overlay_validates_inputs():
    frame = np.zeros((2, 2, 3), dtype=np.uint8)
    with pytest.raises(FlowError):
        overlay(frame, np.zeros((2, 3, 3), dtype=np.uint8), 0.5)
    with pytest.raises(FlowError):
        overlay(frame, frame, 1.5)


# ---------------------------------------------------------------- sequences

def test_flow_sequence_length():
    rng = np.random.default_rng(7)
    frames = [np.zeros((16, 16, 3), dtype=np.uint8) for _ in range(6)]
    for f in frames:
        f[4:8, 4:8] = rng.integers(50, 255, size=3, dtype=np.uint8)
    fields = flow_sequence(frames, FlowParams(iterations=5, levels=1))
    assert len(fields) == 5
    assert all(isinstance(f, FlowField) for f in fields)


def test_flow_sequence_needs_two_frames():
    with pytest.raises(FlowError):
        flow_sequence([np.zeros((8, 8, 3), dtype=np.uint8)])
