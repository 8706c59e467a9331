import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from otfm.degradation import MtfSpec, degrade_spatial
from otfm.imagery import (PAN_NOISE_AMPLITUDE, DatasetManifest, RasterCorruptionError,
                          RasterFormatError, RasterImage, SampleTriplet, extract_patches,
                          load_raster, load_triplet, patch_offsets, read_manifest, save_raster,
                          save_triplet, synth_dataset, synth_scene, write_manifest)


def _triplet(hr, bands=2, ratio=4, seed=0):
    rng = np.random.default_rng(seed)
    return SampleTriplet(RasterImage(rng.random((1, hr, hr))),
                         RasterImage(rng.random((bands, hr // ratio, hr // ratio))),
                         RasterImage(rng.random((bands, hr, hr))), ratio=ratio, name="t")


def test_single_pixel_roundtrip(tmp_path):
    save_raster(RasterImage(np.full((1, 1, 1), 0.5)), tmp_path / "a.otfm")
    assert load_raster(tmp_path / "a.otfm").data[0, 0, 0] == 0.5


def test_nan_rejected(tmp_path):
    img = RasterImage(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        save_raster(img, tmp_path / "a.otfm")


def test_eight_band_roundtrip(tmp_path, rng):
    data = rng.random((8, 64, 64), dtype=np.float32)
    save_raster(RasterImage(data), tmp_path / "a.otfm")
    np.testing.assert_array_equal(load_raster(tmp_path / "a.otfm").data, data)


def test_header_layout(tmp_path):
    save_raster(RasterImage(np.zeros((3, 5, 7))), tmp_path / "a.otfm", bit_depth=16)
    raw = (tmp_path / "a.otfm").read_bytes()
    assert struct.unpack_from("<4sBBHII", raw) == (b"OTFM", 1, 16, 3, 5, 7)
    assert len(raw) == 16 + 3 * 5 * 7 * 2


@pytest.mark.parametrize("depth", [8, 16])
def test_integer_depths_quantise(tmp_path, rng, depth):
    data = rng.random((2, 6, 6))
    save_raster(RasterImage(data), tmp_path / "a.otfm", bit_depth=depth)
    back = load_raster(tmp_path / "a.otfm").data
    scale = 2**depth - 1
    np.testing.assert_allclose(back, np.round(data * scale) / scale, atol=1e-7)
    # a second round trip is exact at the stored precision
    save_raster(RasterImage(back), tmp_path / "b.otfm", bit_depth=depth)
    np.testing.assert_array_equal(load_raster(tmp_path / "b.otfm").data, back)


def test_integer_depth_needs_unit_range(tmp_path):
    with pytest.raises(ValueError):
        save_raster(RasterImage(np.full((1, 2, 2), 1.5)), tmp_path / "a.otfm", bit_depth=8)


def test_truncated_payload(tmp_path, rng):
    save_raster(RasterImage(rng.random((2, 4, 4))), tmp_path / "a.otfm")
    raw = (tmp_path / "a.otfm").read_bytes()
    (tmp_path / "a.otfm").write_bytes(raw[:-3])
    with pytest.raises(RasterCorruptionError):
        load_raster(tmp_path / "a.otfm")


def test_bad_magic_and_version(tmp_path):
    save_raster(RasterImage(np.zeros((1, 2, 2))), tmp_path / "a.otfm")
    raw = bytearray((tmp_path / "a.otfm").read_bytes())
    (tmp_path / "b.otfm").write_bytes(b"XXXX" + bytes(raw[4:]))
    raw[4] = 9
    (tmp_path / "c.otfm").write_bytes(bytes(raw))
    for name in ("b.otfm", "c.otfm"):
        with pytest.raises(RasterFormatError):
            load_raster(tmp_path / name)


def test_zero_dimension_header(tmp_path):
    (tmp_path / "a.otfm").write_bytes(struct.pack("<4sBBHII", b"OTFM", 1, 32, 0, 4, 4))
    with pytest.raises(RasterFormatError):
        load_raster(tmp_path / "a.otfm")


def test_nonfinite_payload(tmp_path):
    blob = struct.pack("<4sBBHII", b"OTFM", 1, 32, 1, 1, 1) + np.float32(np.inf).tobytes()
    (tmp_path / "a.otfm").write_bytes(blob)
    with pytest.raises(RasterCorruptionError):
        load_raster(tmp_path / "a.otfm")


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(-10, 10, width=32)))
def test_roundtrip_property(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("r") / "x.otfm"
    save_raster(RasterImage(data), path)
    np.testing.assert_array_equal(load_raster(path).data, data)


def test_triplet_invariants():
    with pytest.raises(ValueError):
        SampleTriplet(RasterImage(np.zeros((2, 8, 8))), RasterImage(np.zeros((1, 2, 2))))
    with pytest.raises(ValueError):
        SampleTriplet(RasterImage(np.zeros((1, 8, 8))), RasterImage(np.zeros((1, 3, 2))))
    with pytest.raises(ValueError):
        SampleTriplet(RasterImage(np.zeros((1, 8, 8))), RasterImage(np.zeros((2, 2, 2))),
                      RasterImage(np.zeros((3, 8, 8))))


def test_triplet_and_manifest_roundtrip(tmp_path):
    ts = synth_dataset(3, 2, 4, 16, 4)
    for i, t in enumerate(ts):
        save_triplet(t, tmp_path / f"s{i}")
    write_manifest(DatasetManifest(["s0", "s1"], 4, 4, "test"), tmp_path / "manifest.txt")
    first = (tmp_path / "manifest.txt").read_text().splitlines()[0]
    assert first == "#otfm-manifest v1 ratio=4 bands=4 split=test"
    man = read_manifest(tmp_path / "manifest.txt")
    assert (man.ratio, man.bands, man.split, len(man)) == (4, 4, "test", 2)
    man.validate()
    for orig, loaded in zip(ts, man):
        np.testing.assert_array_equal(orig.lrms.data, loaded.lrms.data)
        np.testing.assert_array_equal(orig.hrms_ref.data, loaded.hrms_ref.data)


def test_manifest_band_mismatch(tmp_path):
    save_triplet(synth_scene(0, 4, 16, 4), tmp_path / "s0")
    (tmp_path / "m.txt").write_text("#otfm-manifest v1 ratio=4 bands=3\ns0\n")
    with pytest.raises(RasterFormatError):
        read_manifest(tmp_path / "m.txt").validate()


def test_manifest_needs_header(tmp_path):
    (tmp_path / "m.txt").write_text("s0\n")
    with pytest.raises(RasterFormatError):
        read_manifest(tmp_path / "m.txt")


def test_triplet_without_reference(tmp_path):
    t = synth_scene(0, 2, 16, 4)
    save_triplet(SampleTriplet(t.pan, t.lrms, ratio=4), tmp_path / "x")
    assert load_triplet(tmp_path / "x", 4).hrms_ref is None


def test_single_patch_is_identity():
    t = _triplet(64)
    (p,) = extract_patches(t, 64, 64)
    for a, b in ((p.pan, t.pan), (p.lrms, t.lrms), (p.hrms_ref, t.hrms_ref)):
        np.testing.assert_array_equal(a.data, b.data)


def test_patch_grid_count():
    assert len(extract_patches(_triplet(128), 64, 64)) == 4


def test_patch_remainder_discarded():
    t = _triplet(100)
    patches = extract_patches(t, 64, 32)
    assert [p.name for p in patches] == ["t@0,0", "t@0,32", "t@32,0", "t@32,32"]
    last = patches[-1]
    np.testing.assert_array_equal(last.pan.data, t.pan.data[:, 32:96, 32:96])
    np.testing.assert_array_equal(last.lrms.data, t.lrms.data[:, 8:24, 8:24])


def test_patch_argument_errors():
    t = _triplet(64)
    for patch, stride in ((30, 32), (32, 30), (128, 32), (0, 4)):
        with pytest.raises(ValueError):
            extract_patches(t, patch, stride)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(1, 6), st.integers(1, 6))
def test_patch_count_closed_form(size_blocks, patch_blocks, stride_blocks):
    r = 4
    size, patch, stride = size_blocks * r, patch_blocks * r, stride_blocks * r
    if patch > size:
        return
    t = SampleTriplet(RasterImage(np.zeros((1, size, size))),
                      RasterImage(np.zeros((1, size // r, size // r))), ratio=r)
    per_axis = (size - patch) // stride + 1
    assert len(patch_offsets(size, patch, stride)) == per_axis
    assert len(extract_patches(t, patch, stride)) == per_axis**2


def test_synth_deterministic():
    a, b = synth_scene(11, 4, 32, 4), synth_scene(11, 4, 32, 4)
    for x, y in ((a.pan, b.pan), (a.lrms, b.lrms), (a.hrms_ref, b.hrms_ref)):
        assert x.data.tobytes() == y.data.tobytes()
    assert synth_scene(12, 4, 32, 4).pan.data.tobytes() != a.pan.data.tobytes()


def test_synth_shapes_and_range():
    t = synth_scene(0, bands=4, hr_size=64, ratio=4)
    assert t.lrms.shape == (4, 16, 16)
    assert t.pan.shape == (1, 64, 64)
    for img in (t.pan, t.lrms, t.hrms_ref):
        img.check(unit_range=True)


def test_synth_pan_is_noisy_band_mean():
    t = synth_scene(4, 4, 64, 4)
    mean = t.hrms_ref.data.astype(np.float64).mean(0)
    assert np.abs(t.pan.data[0] - mean).max() <= PAN_NOISE_AMPLITUDE + 1e-6


def test_synth_lrms_is_observation_model():
    t = synth_scene(7, 3, 32, 4)
    low = degrade_spatial(t.hrms_ref, MtfSpec.default(3, 4))
    assert low.data.tobytes() == t.lrms.data.tobytes()


def test_synth_argument_errors():
    for kwargs in (dict(bands=0), dict(ratio=1), dict(hr_size=30, ratio=4)):
        with pytest.raises(ValueError):
            synth_scene(0, **{"bands": 2, "hr_size": 32, "ratio": 4, **kwargs})


def test_synth_dataset_distinct_seeds():
    ds = synth_dataset(0, 3, 2, 16, 4)
    assert len({t.pan.data.tobytes() for t in ds}) == 3
    assert [t.hrms_ref.data.tobytes() for t in ds] == \
        [t.hrms_ref.data.tobytes() for t in synth_dataset(0, 3, 2, 16, 4)]
