import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avwhisper.containers import read_lips, write_lips
from avwhisper.lipgeom import (
    FaceLandmarks,
    GeometryError,
    LipCropSpec,
    crop_distances,
    crop_frame,
    crop_spec,
    crop_video,
    mouth_center,
    read_landmarks,
    smooth_specs,
    write_landmarks,
)


def lm(p1, p2, p3, i=0):
    return FaceLandmarks(p1=p1, p2=p2, p3=p3, frame_index=i)


@pytest.mark.parametrize(
    "p2,p3,center",
    [((40, 60), (60, 60), (50, 60)), ((10, 10), (10, 10), (10, 10)), ((0, 0), (3, 4), (1.5, 2.0))],
)
def test_mouth_center(p2, p3, center):
    assert mouth_center(lm((0, 0), p2, p3)) == center


def test_mouth_center_rejects_nan():
    with pytest.raises(GeometryError):
        mouth_center(lm((0, 0), (float("nan"), 0), (1, 1)))


def test_crop_spec_worked_example():
    spec = crop_spec(lm((50, 40), (40, 60), (60, 60)))
    d_mn, d_p1p2 = crop_distances(lm((50, 40), (40, 60), (60, 60)))
    assert spec.center == (50, 60)
    assert d_mn == 20
    assert d_p1p2 == pytest.approx(math.sqrt(500), abs=1e-12)
    assert spec.width == pytest.approx(44.72135955, abs=1e-8)
    assert spec.width == spec.height
    assert spec.output_size == (96, 96)


@pytest.mark.parametrize(
    "p1,p2,p3",
    [((50, 60), (40, 60), (60, 60)), ((0, 0), (0, 10), (0, -10)), ((5, 5), (5, 5), (5, 5))],
)
def test_crop_spec_degenerate(p1, p2, p3):
    with pytest.raises(GeometryError, match="degenerate"):
        crop_spec(lm(p1, p2, p3))


coord = st.floats(-500, 500, allow_nan=False)
point = st.tuples(coord, coord)


@settings(max_examples=300)
@given(point, point, point, st.floats(0.1, 20))
def test_width_scales_with_landmarks(p1, p2, p3, s):
    a = lm(p1, p2, p3)
    b = lm(tuple(s * v for v in p1), tuple(s * v for v in p2), tuple(s * v for v in p3))
    da, db = crop_distances(a), crop_distances(b)
    assert db[0] == pytest.approx(s * da[0], rel=1e-9, abs=1e-9)
    assert db[1] == pytest.approx(s * da[1], rel=1e-9, abs=1e-9)


@settings(max_examples=300)
@given(point, point, point)
def test_width_branches(p1, p2, p3):
    d_mn, d_p1p2 = crop_distances(lm(p1, p2, p3))
    try:
        w = crop_spec(lm(p1, p2, p3)).width
    except GeometryError:
        assert d_mn == 0
        return
    a, b = 3.2 * d_mn, 2 * max(d_mn, d_p1p2)
    assert w <= a and w <= b
    assert w == a or w == b


# --------------------------------------------------------------------------- crops


def test_crop_constant_frame():
    frame = np.full((200, 240), 7.25)
    out = crop_frame(frame, LipCropSpec(center=(120.3, 99.7), width=57.3))
    assert out.shape == (96, 96)
    np.testing.assert_allclose(out, 7.25, rtol=0, atol=1e-12)


def test_crop_corner_is_zero_padded():
    frame = np.full((100, 100), 5.0)
    out = crop_frame(frame, LipCropSpec(center=(0.0, 0.0), width=40.0))
    # top-left quadrant lies outside the frame
    assert np.all(out[:40, :40] == 0)
    np.testing.assert_allclose(out[60:, 60:], 5.0)
    assert out.min() >= 0 and out.max() <= 5.0


def test_crop_aligned_window_is_exact():
    rng = np.random.default_rng(0)
    frame = rng.uniform(0, 255, size=(150, 170))
    out = crop_frame(frame, LipCropSpec(center=(30 + 48.0, 20 + 48.0), width=96.0))
    np.testing.assert_array_equal(out, frame[20:116, 30:126])


@settings(max_examples=50, deadline=None)
@given(st.integers(-20, 20), st.integers(-20, 20))
def test_crop_translation_equivariance(dx, dy):
    rng = np.random.default_rng(1)
    base = np.zeros((200, 200))
    base[40:160, 40:160] = rng.uniform(0, 1, size=(120, 120))
    shifted = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
    a = lm((100.0, 70.0), (85.5, 110.25), (114.0, 109.0))
    b = lm((100.0 + dx, 70.0 + dy), (85.5 + dx, 110.25 + dy), (114.0 + dx, 109.0 + dy))
    out_a = crop_frame(base, crop_spec(a))
    out_b = crop_frame(shifted, crop_spec(b))
    np.testing.assert_allclose(out_a, out_b, atol=1e-9)


def test_crop_rejects_empty_frame():
    with pytest.raises(GeometryError):
        crop_frame(np.zeros((0, 0)), LipCropSpec(center=(0, 0), width=10))


def test_smoothing_averages_centers():
    specs = [LipCropSpec(center=(float(x), 0.0), width=10.0) for x in (0, 10, 20, 30, 40, 50)]
    out = smooth_specs(specs)
    assert [s.center[0] for s in out] == [10.0, 15.0, 20.0, 30.0, 35.0, 40.0]
    assert all(s.width == 10.0 for s in out)


def test_landmarks_file_round_trip(tmp_path):
    lms = [lm((1.5, 2.0), (3.25, 4.0), (5.0, 6.125), i) for i in range(3)]
    write_landmarks(tmp_path / "x.lm", lms)
    assert read_landmarks(tmp_path / "x.lm") == lms


def test_landmarks_file_rejects_short_line(tmp_path):
    (tmp_path / "x.lm").write_text("0 1 2 3 4 5\n")
    with pytest.raises(GeometryError, match="7 fields"):
        read_landmarks(tmp_path / "x.lm")


def test_crop_video_and_container(tmp_path):
    frames = np.random.default_rng(0).integers(0, 255, size=(4, 128, 128), dtype=np.uint8)
    lms = [lm((64.0, 50.0), (50.0, 84.0), (78.0, 84.0), i) for i in range(4)]
    crops = crop_video(frames, lms)
    assert crops.shape == (4, 96, 96) and crops.dtype == np.float32
    write_lips(tmp_path / "u.lips", crops)
    raw = (tmp_path / "u.lips").read_bytes()
    assert raw[:4] == b"LIPS" and int.from_bytes(raw[12:16], "little") == 4
    assert len(raw) == 16 + 4 * 96 * 96 * 4
    np.testing.assert_array_equal(read_lips(tmp_path / "u.lips"), crops)


def test_crop_video_needs_every_frame():
    with pytest.raises(GeometryError):
        crop_video(np.zeros((3, 50, 50)), [lm((25, 10), (15, 30), (35, 30), 0)])
