import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mcseg.errors import ConfigError, FormatError, NumericalError, ShapeError
from mcseg.motion import (FlowField, FrameSequence, HornSchunckParams, brightness_residual, flow_to_rgb,
                          frame_diff, horn_schunck, hue_index, image_gradients, read_flo, sequence_diffs,
                          write_flo)

unit_images = arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8), st.just(3)),
                     elements=st.floats(0, 1))


def sinusoid_pair(size=64, cycles=5):
    """Smooth periodic pattern and its copy translated one pixel to the right."""
    y, x = np.mgrid[0:size, 0:size]
    k = 2 * np.pi * cycles / size
    img = 0.5 + 0.5 * np.sin(k * x) * np.sin(k * y)
    return img, np.roll(img, 1, axis=1)


def square_frame(x0, size=16, side=4):
    img = np.zeros((size, size, 3))
    img[6:6 + side, x0:x0 + side] = 1.0
    return img


# ------------------------------------------------------------ frame_diff


def test_diff_of_identical_frames_is_zero():
    a = np.random.default_rng(0).random((5, 7, 3))
    assert not frame_diff(a, a).any()


def test_diff_value_order_independent():
    a = np.full((1, 1, 3), 10 / 255)
    b = np.full((1, 1, 3), 250 / 255)
    np.testing.assert_allclose(frame_diff(a, b), 240 / 255)
    np.testing.assert_array_equal(frame_diff(a, b), frame_diff(b, a))


def test_diff_of_moving_square_is_symmetric_difference():
    a, b = square_frame(3), square_frame(5)
    d = frame_diff(a, b)
    expected = np.zeros((16, 16), bool)
    for y in range(16):
        for x in range(16):
            in_a = 6 <= y < 10 and 3 <= x < 7
            in_b = 6 <= y < 10 and 5 <= x < 9
            expected[y, x] = in_a != in_b
    np.testing.assert_array_equal(d.any(axis=2), expected)


def test_diff_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        frame_diff(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


@given(unit_images, st.data())
@settings(max_examples=50, deadline=None)
def test_diff_symmetric_and_bounded(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=st.floats(0, 1)))
    d = frame_diff(a, b)
    assert np.array_equal(d, frame_diff(b, a))
    assert (d >= 0).all() and (d <= 1).all()
    assert not frame_diff(a, a).any()


def test_sequence_diffs_uses_backward_difference_at_end():
    rng = np.random.default_rng(1)
    frames = [rng.random((4, 4, 3)) for _ in range(3)]
    diffs = sequence_diffs(frames)
    assert len(diffs) == 3
    np.testing.assert_array_equal(diffs[2], np.abs(frames[2] - frames[1]))


def test_frame_sequence_invariants():
    with pytest.raises(ShapeError):
        FrameSequence([np.zeros((2, 2, 3)), np.zeros((2, 2, 3))], [1, 1])
    with pytest.raises(ShapeError):
        FrameSequence([np.zeros((2, 2, 3)), np.zeros((3, 2, 3))], [0, 1])


# ------------------------------------------------------------ gradients


def test_gradients_of_constant_frames_are_zero():
    a = np.full((6, 6), 0.3)
    for g in image_gradients(a, a):
        assert not g.any()


def test_gradients_of_ramp():
    w = 16
    ramp = np.tile(np.arange(w) / w, (8, 1))
    ix, iy, it = image_gradients(ramp, ramp)
    np.testing.assert_allclose(ix[:-1, :-1], 1 / w)
    np.testing.assert_allclose(iy[:-1, :-1], 0, atol=1e-15)
    assert not it.any()


def test_gradients_temporal_offset():
    rng = np.random.default_rng(2)
    a = rng.random((8, 8, 3)) * 0.5
    ix0, iy0, _ = image_gradients(a, a)
    ix, iy, it = image_gradients(a, a + 0.1)
    np.testing.assert_allclose(it, 0.1)
    np.testing.assert_allclose(ix, ix0, atol=1e-15)
    np.testing.assert_allclose(iy, iy0, atol=1e-15)


# ------------------------------------------------------------ horn-schunck


def test_params_validation():
    with pytest.raises(ConfigError):
        HornSchunckParams(alpha=0)
    with pytest.raises(ConfigError):
        HornSchunckParams(iterations=0)


@given(unit_images, st.floats(0.1, 10), st.integers(1, 30))
@settings(max_examples=25, deadline=None)
def test_identical_frames_give_zero_flow(img, alpha, iters):
    flow = horn_schunck(img, img, HornSchunckParams(alpha, iters, 0.0))
    assert not flow.u.any() and not flow.v.any()


def test_recovers_unit_translation():
    a, b = sinusoid_pair()
    flow = horn_schunck(a, b, HornSchunckParams(alpha=1.0, iterations=200, early_stop_delta=0.0))
    m = 8
    epe = np.hypot(flow.u - 1, flow.v)[m:-m, m:-m].mean()
    assert epe < 0.3


def test_residual_non_increasing_at_checkpoints():
    a, b = sinusoid_pair()
    flow = horn_schunck(a, b, HornSchunckParams(1.0, 200, 0.0), checkpoint_every=10)
    sweeps = [s for s, _ in flow.history]
    assert sweeps == list(range(0, 201, 10))
    res = [r for _, r in flow.history]
    assert all(b <= a for a, b in zip(res, res[1:]))


def test_converged_flow_explains_temporal_derivative():
    a, b = sinusoid_pair()
    ix, iy, it = image_gradients(a, b)
    flow = horn_schunck(a, b, HornSchunckParams(1.0, 200, 0.0))
    after = np.abs(brightness_residual(ix, iy, it, flow.u, flow.v)).mean()
    assert after < np.abs(it).mean()


def test_early_stop_limits_sweeps():
    a, b = sinusoid_pair()
    flow = horn_schunck(a, b, HornSchunckParams(1.0, 5000, 1e-3), checkpoint_every=1)
    assert flow.history[-1][0] < 5000


def test_non_finite_reports_iteration():
    a = np.zeros((4, 4))
    b = a.copy()
    b[1, 1] = np.inf
    with pytest.raises(NumericalError, match="iteration 1"):
        horn_schunck(a, b, HornSchunckParams(1.0, 3, 0.0))


# ------------------------------------------------------------ colorization


def test_zero_flow_is_white():
    img = flow_to_rgb(FlowField(np.zeros((4, 5)), np.zeros((4, 5))))
    np.testing.assert_array_equal(img, 1.0)


def test_uniform_flow_is_uniform_color():
    img = flow_to_rgb(FlowField(np.ones((4, 5)), np.zeros((4, 5))))
    assert np.all(img == img[0, 0])
    assert not np.allclose(img[0, 0], 1.0)


@given(st.integers(0, 10_000), st.floats(0.01, 100))
@settings(max_examples=30, deadline=None)
def test_hue_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
    f1 = FlowField(u, v)
    f2 = FlowField(u * scale, v * scale)
    np.testing.assert_allclose(hue_index(f1), hue_index(f2), atol=1e-6)
    np.testing.assert_allclose(flow_to_rgb(f1), flow_to_rgb(f2), atol=1e-5)


# ------------------------------------------------------------ .flo


def test_flo_layout(tmp_path):
    flow = FlowField(np.array([[1.0, 0.5]]), np.array([[-1.0, 0.0]]))
    path = tmp_path / "a.flo"
    write_flo(flow, path)
    expected = (b"PIEH" + struct.pack("<ii", 2, 1) + struct.pack("<4f", 1.0, -1.0, 0.5, 0.0))
    assert path.read_bytes() == expected
    assert len(expected) == 12 + 16


def test_flo_bad_magic(tmp_path):
    path = tmp_path / "bad.flo"
    path.write_bytes(struct.pack("<fii", 0.0, 1, 1) + bytes(8))
    with pytest.raises(FormatError) as err:
        read_flo(path)
    assert err.value.offset == 0


def test_flo_truncated(tmp_path):
    path = tmp_path / "short.flo"
    path.write_bytes(struct.pack("<fii", 202021.25, 4, 4) + bytes(10))
    with pytest.raises(FormatError, match="offset 22"):
        read_flo(path)


def test_flo_roundtrip_random(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "r.flo"
    for _ in range(1000):
        h, w = rng.integers(1, 9, size=2)
        flow = FlowField(rng.normal(scale=50, size=(h, w)), rng.normal(scale=50, size=(h, w)))
        write_flo(flow, path)
        back = read_flo(path)
        assert back.u.tobytes() == flow.u.tobytes() and back.v.tobytes() == flow.v.tobytes()
