import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from thermnet.errors import CorruptFile, CropTooLarge, EmptyInput, NonFiniteTemperature
from thermnet.thermal import (
    QuantizationRange,
    QuantizedImage,
    Roi,
    ThermalFrame,
    center_crop,
    crop_and_quantize,
    decode_dtif,
    encode_dtif,
    quantize,
    range_over_roi,
    read_dtif,
    round_half_away,
    thermal_dynamics,
    write_dtif,
)

# centi-degree grid: differences stay far above float resolution after offsets
temps_st = arrays(
    np.int64,
    st.tuples(st.integers(1, 12), st.integers(1, 12)),
    elements=st.integers(-4000, 12000),
).map(lambda a: a / 100.0)


def frame(values):
    return ThermalFrame(np.asarray(values, dtype=np.float64))


# --- crop and range ---------------------------------------------------------


def test_center_crop_of_camera_frame():
    assert center_crop(frame(np.zeros((120, 160))), 75) == Roi(42, 22, 75)


def test_center_crop_full_frame():
    assert center_crop(frame(np.zeros((10, 10))), 10) == Roi(0, 0, 10)


def test_center_crop_too_large():
    with pytest.raises(CropTooLarge):
        center_crop(frame(np.zeros((5, 5))), 6)


def test_roi_outside_frame_rejected():
    with pytest.raises(CropTooLarge):
        Roi(3, 0, 3).extract(frame(np.zeros((4, 4))))


def test_non_finite_frame_rejected():
    with pytest.raises(NonFiniteTemperature):
        frame([[1.0, np.nan]])


def test_range_by_inspection():
    f = frame([[10, 12], [11, 14]])
    assert range_over_roi(f, Roi(0, 0, 2)) == (10.0, 14.0)
    assert range_over_roi(frame(np.full((3, 3), 21.5)), Roi(0, 0, 3)) == (21.5, 21.5)


def test_range_matches_full_scan(rng):
    temps = rng.normal(25, 3, size=(75, 75))
    lo, hi = range_over_roi(frame(temps), Roi(0, 0, 75))
    flat = [temps[i, j] for i in range(75) for j in range(75)]
    assert (lo, hi) == (min(flat), max(flat))


# --- quantization -----------------------------------------------------------


def test_round_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away([0.5, 1.5, 2.5, -0.5, -1.5, 0.49]), [1, 2, 3, -1, -2, 0])


def test_quantize_hand_example():
    img = quantize(frame([[10, 12], [11, 14]]))
    np.testing.assert_array_equal(img.pixels, [[0, 128], [64, 255]])
    assert img.dynamics == 4.0


def test_quantize_flat_frame():
    img = quantize(frame(np.full((4, 4), 30.0)))
    assert not img.pixels.any()
    assert img.dynamics == 0.0


def test_quantize_offset_invariant_example():
    f = frame([[10, 12], [11, 14]])
    shifted = frame(f.temps + 5.3)
    assert quantize(shifted) == quantize(f)


def test_quantize_custom_range():
    img = quantize(frame([[0.0, 1.0]] * 2), qrange=QuantizationRange(16, 32))
    assert img.pixels.min() == 16 and img.pixels.max() == 32


def test_quantization_range_validation():
    with pytest.raises(ValueError):
        QuantizationRange(10, 10)


@given(temps_st, st.floats(-50, 50), st.floats(0.1, 10))
def test_quantize_affine_invariance(temps, offset, scale):
    f = frame(temps)
    base = quantize(f, rounding=False)
    moved = quantize(frame(temps * scale + offset), rounding=False)
    np.testing.assert_allclose(moved.pixels, base.pixels, atol=1e-6)


@given(temps_st)
def test_quantize_in_range_and_extremes(temps):
    img = quantize(frame(temps))
    assert img.pixels.min() >= 0 and img.pixels.max() <= 255
    n = min(temps.shape)
    region = temps[(temps.shape[0] - n) // 2 :, (temps.shape[1] - n) // 2 :][:n, :n]
    if region.max() > region.min():
        assert img.pixels.min() == 0 and img.pixels.max() == 255
        assert img.dynamics == pytest.approx(region.max() - region.min())


@given(temps_st)
def test_quantize_monotone(temps):
    f = frame(temps)
    n = min(temps.shape)
    roi = center_crop(f, n)
    region = roi.extract(f).ravel()
    pix = quantize(f, roi).pixels.ravel()
    order = np.argsort(region, kind="stable")
    assert np.all(np.diff(pix[order]) >= 0)


# --- dynamics statistics ----------------------------------------------------


def test_dynamics_singleton_and_pair():
    s = thermal_dynamics([4.0])
    assert (s.minimum, s.maximum, s.mean, s.sd) == (4.0, 4.0, 4.0, 0.0)
    s = thermal_dynamics([1.0, 3.0])
    assert (s.minimum, s.maximum, s.mean, s.sd) == (1.0, 3.0, 2.0, 1.0)


def test_dynamics_empty():
    with pytest.raises(EmptyInput):
        thermal_dynamics([])


def test_dynamics_of_images_match_raw_recount(rng):
    frames = [frame(rng.normal(20, rng.uniform(0.5, 3), size=(10, 12))) for _ in range(200)]
    images = [crop_and_quantize(f, 8) for f in frames]
    raw = []
    for f in frames:
        region = f.temps[1:9, 2:10]
        raw.append(region.max() - region.min())
    stats = thermal_dynamics(images)
    assert stats.mean == pytest.approx(np.mean(raw), rel=1e-12)
    assert stats.sd == pytest.approx(np.std(raw), rel=1e-9)
    assert (stats.minimum, stats.maximum) == (min(raw), max(raw))


# --- DTIF -------------------------------------------------------------------


def test_dtif_round_trip(tmp_path, rng):
    f = ThermalFrame(rng.normal(25, 2, size=(7, 9)).astype(np.float32))
    write_dtif(tmp_path / "f.dtif", f)
    g = read_dtif(tmp_path / "f.dtif")
    np.testing.assert_array_equal(g.temps, f.temps)
    assert encode_dtif(g) == encode_dtif(f)


def test_dtif_bad_magic_names_path(tmp_path):
    p = tmp_path / "bad.dtif"
    p.write_bytes(b"XXXX" + encode_dtif(frame(np.zeros((2, 2))))[4:])
    with pytest.raises(CorruptFile, match="bad.dtif"):
        read_dtif(p)


def test_dtif_truncated():
    buf = encode_dtif(frame(np.zeros((3, 3))))
    with pytest.raises(CorruptFile):
        decode_dtif(buf[:-1])
    with pytest.raises(CorruptFile):
        decode_dtif(buf[:5])


def test_quantized_image_equality():
    a = QuantizedImage(np.zeros((2, 2), dtype=np.int64), 1.0)
    assert a == QuantizedImage(np.zeros((2, 2), dtype=np.int64), 1.0)
    assert a != QuantizedImage(np.ones((2, 2), dtype=np.int64), 1.0)


@settings(max_examples=50)
@given(temps_st)
def test_dtif_bytes_round_trip(temps):
    f = ThermalFrame(temps.astype(np.float32))
    assert encode_dtif(decode_dtif(encode_dtif(f))) == encode_dtif(f)
