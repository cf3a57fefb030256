import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcsynth.volume_core import (
    DENSE_WINDOW,
    FULL_WINDOW,
    GeometryRecord,
    HUWindow,
    MultiChannelSlice,
    Volume3D,
    VolumeFormatError,
    pad_or_crop,
    read_volume,
    undo_pad_or_crop,
    window_denormalize,
    window_normalize,
    write_volume,
)

WINDOWS = [FULL_WINDOW, DENSE_WINDOW, HUWindow(-150, 150), HUWindow(-20, 180)]


def test_volume_rejects_bad_input():
    with pytest.raises(ValueError):
        Volume3D(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    v = Volume3D(np.zeros((2, 3, 4)), spacing=(2, 1, 1))
    assert v.shape == (2, 3, 4)


def test_window_must_be_ordered():
    with pytest.raises(ValueError):
        HUWindow(10, 10)
    assert HUWindow(-100, 100).width == 200


@pytest.mark.parametrize("window", WINDOWS, ids=lambda w: f"{w.lo:g}_{w.hi:g}")
def test_normalize_roundtrip_dense_sweep(window):
    x = np.linspace(window.lo, window.hi, 200_001)
    back = window_denormalize(window_normalize(x, window), window)
    assert np.max(np.abs(back - x)) <= 1e-3


def test_normalize_clips_and_endpoints():
    y = window_normalize(np.array([-5000.0, -1024.0, 3000.0, 9000.0]), FULL_WINDOW)
    np.testing.assert_array_equal(y, [0.0, 0.0, 1.0, 1.0])
    assert y.dtype == np.float32


def test_normalize_rejects_nan():
    with pytest.raises(ValueError):
        window_normalize(np.array([0.0, np.nan]), FULL_WINDOW)


def test_denormalize_rejects_out_of_range():
    with pytest.raises(ValueError):
        window_denormalize(np.array([1.1]), FULL_WINDOW)


@settings(max_examples=200, deadline=None)
@given(
    ny=st.integers(1, 40), nx=st.integers(1, 40),
    ty=st.integers(1, 40), tx=st.integers(1, 40),
    seed=st.integers(0, 2**32 - 1),
)
def test_pad_undo_is_identity(ny, nx, ty, tx, seed):
    img = np.random.default_rng(seed).random((ny, nx)).astype(np.float32)
    out, rec = pad_or_crop(img, (ty, tx))
    assert out.shape == (ty, tx)
    back = undo_pad_or_crop(out, rec)
    assert back.shape == (ny, nx)
    # cropping is lossy; only the retained window must survive bitwise
    y0, x0 = rec.crop_before
    keep_y, keep_x = min(ny, ty), min(nx, tx)
    np.testing.assert_array_equal(back[y0:y0 + keep_y, x0:x0 + keep_x], img[y0:y0 + keep_y, x0:x0 + keep_x])
    if ny <= ty and nx <= tx:
        np.testing.assert_array_equal(back, img)


def test_pad_extra_voxel_goes_to_trailing_side():
    out, rec = pad_or_crop(np.ones((2, 2), np.float32), (5, 5))
    assert rec.pad_before == (1, 1)
    np.testing.assert_array_equal(out[1:3, 1:3], 1)
    assert out[3:, :].sum() == 0 and out[0].sum() == 0
    out, rec = pad_or_crop(np.arange(25, dtype=np.float32).reshape(5, 5), (2, 2))
    assert rec.crop_before == (1, 1)
    np.testing.assert_array_equal(out, [[6, 7], [11, 12]])


def test_geometry_record_roundtrip():
    rec = GeometryRecord((3, 4), (5, 2), (1, 0), (0, 1))
    assert GeometryRecord.from_dict(json.loads(json.dumps(rec.to_dict()))) == rec


def test_multichannel_slice_contract():
    rec = GeometryRecord((4, 4), (4, 4), (0, 0), (0, 0))
    with pytest.raises(ValueError):
        MultiChannelSlice(np.zeros((2, 4, 4), np.float32), rec)
    with pytest.raises(ValueError):
        MultiChannelSlice(np.full((3, 4, 4), 1.5, np.float32), rec)


@pytest.mark.parametrize("dtype", ["f32", "i16"])
def test_svf_roundtrip(tmp_path, dtype):
    data = np.random.default_rng(0).integers(-1024, 3000, (3, 4, 5)).astype(np.float32)
    vol = Volume3D(data, spacing=(2.5, 1.0, 0.5), origin=(1.0, -2.0, 3.0))
    write_volume(vol, tmp_path / "v", dtype=dtype)
    header = json.loads((tmp_path / "v.json").read_text())
    assert header["shape"] == [3, 4, 5] and header["dtype"] == dtype
    back = read_volume(tmp_path / "v")
    np.testing.assert_array_equal(back.data, data)
    assert back.spacing == vol.spacing and back.origin == vol.origin
    assert back.data.dtype == np.float32


def test_svf_rejects_truncated_payload(tmp_path):
    write_volume(Volume3D(np.zeros((2, 2, 2))), tmp_path / "v")
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(VolumeFormatError):
        read_volume(tmp_path / "v")


def test_svf_rejects_unknown_dtype(tmp_path):
    write_volume(Volume3D(np.zeros((2, 2, 2))), tmp_path / "v")
    header = json.loads((tmp_path / "v.json").read_text())
    header["dtype"] = "f64"
    (tmp_path / "v.json").write_text(json.dumps(header))
    with pytest.raises(VolumeFormatError):
        read_volume(tmp_path / "v")
