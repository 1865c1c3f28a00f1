import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unest.metrics import dsc
from unest.volume_io import (
    BadMagicError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    Volume,
    augment,
    augment_plan,
    decode_nifti,
    encode_nifti,
    intensity_window,
    random_crop,
    read_nifti,
    read_raw,
    read_volume,
    resample,
    synthetic_shapes,
    training_stream,
    write_nifti,
    write_raw,
)

DTYPES = [np.uint8, np.int16, np.int32, np.float32, np.float64, np.uint16]


def sample(dtype, shape=(4, 3, 5), seed=0):
    return np.random.default_rng(seed).integers(0, 120, size=shape).astype(dtype)


class TestVolume:
    def test_values_are_read_only(self):
        v = Volume(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            v.values[0, 0, 0] = 1

    @pytest.mark.parametrize("spacing", [(0, 1, 1), (1, -1, 1), (1, 1)])
    def test_bad_spacing(self, spacing):
        with pytest.raises(ValueError, match="spacing"):
            Volume(np.zeros((2, 2, 2)), spacing)

    def test_label_needs_non_negative_integers(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2, 2)), kind="label")
        with pytest.raises(ValueError):
            Volume(-np.ones((2, 2, 2), int), kind="label")


class TestNifti:
    def test_synthetic_file(self, tmp_path):
        vol = Volume(np.arange(64, dtype=np.float32).reshape(4, 4, 4))
        back = read_nifti(write_nifti(vol, tmp_path / "a.nii"))
        assert back.shape == (4, 4, 4) and back.spacing == (1.0, 1.0, 1.0)

    @pytest.mark.parametrize("dtype", DTYPES)
    @pytest.mark.parametrize("name", ["v.nii", "v.nii.gz"])
    def test_roundtrip_bitwise(self, tmp_path, dtype, name):
        vol = Volume(sample(dtype), (0.8, 1.5, 2.0), origin=(-10.0, 4.5, 0.0))
        back = read_nifti(write_nifti(vol, tmp_path / name))
        assert back.values.dtype == vol.values.dtype
        assert back.values.tobytes() == vol.values.tobytes()
        assert back.spacing == pytest.approx(vol.spacing) and back.origin == vol.origin
        again = read_nifti(write_nifti(back, tmp_path / ("2" + name)))
        assert again.values.tobytes() == vol.values.tobytes()

    def test_header_layout(self):
        blob = encode_nifti(Volume(np.zeros((3, 4, 5), np.int16), (1.0, 2.0, 3.0)))
        assert struct.unpack_from("<i", blob, 0)[0] == 348
        assert blob[344:348] == b"n+1\0"
        assert struct.unpack_from("<8h", blob, 40)[:4] == (3, 3, 4, 5)
        assert struct.unpack_from("<h", blob, 70)[0] == 4
        assert struct.unpack_from("<f", blob, 108)[0] == 352.0
        assert struct.unpack_from("<4f", blob, 76)[1:4] == (1.0, 2.0, 3.0)

    def test_big_endian(self):
        vol = Volume(sample(np.float32))
        blob = encode_nifti(vol, endian=">")
        assert struct.unpack_from(">i", blob, 0)[0] == 348
        assert decode_nifti(blob).values.tobytes() == vol.values.tobytes()

    def test_fortran_order_on_disk(self):
        vol = Volume(np.arange(24, dtype=np.int16).reshape(2, 3, 4))
        payload = np.frombuffer(encode_nifti(vol)[352:], "<i2")
        # first axis varies fastest
        assert list(payload[:3]) == [0, 12, 4]

    def test_scaling_applied(self):
        blob = bytearray(encode_nifti(Volume(np.array([1, 2, 3], np.int16).reshape(1, 1, 3))))
        struct.pack_into("<ff", blob, 112, 2.0, -1.0)
        np.testing.assert_array_equal(decode_nifti(bytes(blob)).values.ravel(), [1.0, 3.0, 5.0])

    def test_ni1_pair(self, tmp_path):
        vol = Volume(sample(np.int16))
        blob = bytearray(encode_nifti(vol))
        blob[344:348] = b"ni1\0"
        (tmp_path / "p.hdr").write_bytes(bytes(blob[:348]))
        (tmp_path / "p.img").write_bytes(bytes(blob[352:]))
        assert read_nifti(tmp_path / "p.hdr").values.tobytes() == vol.values.tobytes()

    def test_bad_magic(self):
        blob = bytearray(encode_nifti(Volume(sample(np.uint8))))
        blob[344:348] = b"XXXX"
        with pytest.raises(BadMagicError):
            decode_nifti(bytes(blob))

    def test_unsupported_datatype(self):
        blob = bytearray(encode_nifti(Volume(sample(np.uint8))))
        struct.pack_into("<h", blob, 70, 32)  # complex64
        with pytest.raises(UnsupportedDatatypeError):
            decode_nifti(bytes(blob))

    def test_truncated_payload(self, tmp_path):
        path = write_nifti(Volume(sample(np.float32)), tmp_path / "t.nii")
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TruncatedPayloadError):
            read_nifti(path)

    def test_gzip_detected_by_content(self, tmp_path):
        vol = Volume(sample(np.uint16))
        (tmp_path / "g.nii").write_bytes(gzip.compress(encode_nifti(vol)))
        assert read_nifti(tmp_path / "g.nii").values.tobytes() == vol.values.tobytes()

    def test_label_intent_roundtrip(self, tmp_path):
        vol = Volume(sample(np.uint8), kind="label")
        assert read_nifti(write_nifti(vol, tmp_path / "l.nii")).kind == "label"


class TestRaw:
    @pytest.mark.parametrize("kind,dtype", [("intensity", np.float32), ("label", np.uint16)])
    def test_roundtrip(self, tmp_path, kind, dtype):
        vol = Volume(sample(dtype), (1.0, 0.5, 2.5), kind)
        back = read_raw(write_raw(vol, tmp_path / "v.raw"))
        assert back.values.tobytes() == vol.values.tobytes()
        assert (back.spacing, back.kind) == (vol.spacing, vol.kind)
        assert (tmp_path / "v.raw.txt").exists()

    def test_dispatch(self, tmp_path):
        vol = Volume(sample(np.float32))
        write_raw(vol, tmp_path / "v.raw")
        assert read_volume(tmp_path / "v.raw").values.tobytes() == vol.values.tobytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_volume(tmp_path / "nope.nii")


class TestPreprocessing:
    @pytest.mark.parametrize("hu,expected", [(-175, 0.0), (275, 1.0), (50, 0.5), (-1000, 0.0), (3000, 1.0)])
    def test_ct_window(self, hu, expected):
        out = intensity_window(Volume(np.full((1, 1, 1), hu, np.int16)))
        assert out.values.item() == pytest.approx(expected)

    def test_window_order(self):
        with pytest.raises(ValueError):
            intensity_window(Volume(np.zeros((1, 1, 1))), 5, 5)

    def test_resample_identity(self):
        vol = Volume(sample(np.float32), (1.5, 1.5, 2.0))
        assert resample(vol, (1.5, 1.5, 2.0)).values.tobytes() == vol.values.tobytes()

    def test_resample_doubles_extents(self):
        vol = Volume(sample(np.float32, (4, 4, 4)), (2.0, 2.0, 2.0))
        up = resample(vol, (1.0, 1.0, 1.0))
        assert up.shape == (8, 8, 8) and up.spacing == (1.0, 1.0, 1.0)
        np.testing.assert_array_equal(up.values[::2, ::2, ::2], vol.values)

    def test_resample_extent_rounding(self):
        vol = Volume(np.zeros((5, 3, 1), np.float32), (1.0, 1.0, 1.0))
        assert resample(vol, (2.0, 2.0, 3.0)).shape == (3, 2, 1)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.4, 3.0), st.integers(0, 1000))
    def test_resample_bounds_and_labels(self, target, seed):
        rng = np.random.default_rng(seed)
        img = Volume(rng.normal(size=(5, 4, 6)).astype(np.float32), (1.0, 1.3, 0.7))
        lab = Volume(rng.choice([0, 2, 7], size=(5, 4, 6)), (1.0, 1.3, 0.7), "label")
        out = resample(img, (target,) * 3).values
        assert out.min() >= img.values.min() - 1e-6 and out.max() <= img.values.max() + 1e-6
        assert set(np.unique(resample(lab, (target,) * 3).values)) <= {0, 2, 7}


class TestAugment:
    def test_no_op_seed_is_identity(self):
        seed = next(s for s in range(1000) if augment_plan(s).is_identity)
        img, lab = np.random.default_rng(0).normal(size=(6, 6, 6)), np.zeros((6, 6, 6), int)
        a, b = augment(img, lab, seed)
        assert np.array_equal(a, img) and np.array_equal(b, lab)

    def test_reproducible(self):
        img = np.random.default_rng(0).normal(size=(1, 6, 6, 6)).astype(np.float32)
        lab = (img[0] > 0).astype(np.int64)
        a1, b1 = augment(img, lab, 5, p=0.7)
        a2, b2 = augment(img, lab, 5, p=0.7)
        assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_spatial_correspondence(self, seed):
        # image encodes the label, so any spatial mismatch would show up
        lab = np.random.default_rng(1).integers(0, 3, size=(4, 5, 6))
        img = lab.astype(np.float64)
        a, b = augment(img, lab, seed, p=0.5)
        plan = augment_plan(seed, 0.5)
        recovered = np.rint((a - plan.shift) / plan.scale) if plan.intensity else a
        assert np.array_equal(recovered.astype(int), b)
        assert dsc(b, b, 1) == 1.0
        assert sorted(np.unique(b)) == sorted(np.unique(lab))

    def test_double_flip_is_identity(self):
        from unest.volume_io import AugmentPlan, apply_spatial

        plan = AugmentPlan((True, False, True), False, (0, 1), 1, False, 1.0, 0.0)
        x = np.random.default_rng(0).normal(size=(3, 4, 5))
        assert np.array_equal(apply_spatial(apply_spatial(x, plan), plan), x)

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            augment(np.zeros((4, 4, 4)), np.zeros((4, 4, 5), int), 0)


class TestCropping:
    def test_foreground_crop_contains_foreground(self):
        image, label = synthetic_shapes(32)
        rng = np.random.default_rng(0)
        for _ in range(10):
            img, lab = random_crop(image, label, (8, 8, 8), rng, foreground_prob=1.0)
            assert img.shape == (1, 8, 8, 8) and lab.any()

    def test_small_volume_is_padded(self):
        img, lab = random_crop(np.ones((1, 3, 3, 3)), np.ones((3, 3, 3), int), (4, 4, 4), np.random.default_rng(0))
        assert img.shape == (1, 4, 4, 4) and lab.shape == (4, 4, 4)

    def test_stream_is_seed_deterministic(self):
        pairs = [synthetic_shapes(16, seed=s) for s in range(2)]
        a = [x for _, x in zip(range(3), training_stream(pairs, (8, 8, 8), seed=4))]
        b = [x for _, x in zip(range(3), training_stream(pairs, (8, 8, 8), seed=4))]
        assert all(np.array_equal(p[0], q[0]) and np.array_equal(p[1], q[1]) for p, q in zip(a, b))


@pytest.mark.parametrize(
    "dtype,low,expected", [(np.int64, 0, np.uint8), (bool, 0, np.uint8), (np.int8, -3, np.int16), (np.int64, 70000, np.int32)]
)
def test_wide_integers_are_narrowed(dtype, low, expected):
    values = np.array([[[low, 1], [1, 0]]]).astype(dtype)
    back = decode_nifti(encode_nifti(Volume(values)))
    assert back.values.dtype == expected and np.array_equal(back.values, values)
