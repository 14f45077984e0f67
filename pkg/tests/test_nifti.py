from __future__ import annotations

import struct

import nibabel as nib
import numpy as np
import pytest

from glioseg.nifti import (
    NiftiError,
    WeightStore,
    WeightStoreError,
    encode_volume,
    read_labels,
    read_volume,
    read_weights,
    write_volume,
    write_weights,
)
from glioseg.volume import SegmentationMap, Volume3D, VolumeError


def _volume(rng, dtype=np.float32, dims=(3, 4, 5)):
    return Volume3D(rng.normal(size=dims).astype(dtype), (2.5, 1.25, 0.5))


def test_round_trip_float_bit_exact(tmp_path, rng):
    vol = _volume(rng)
    write_volume(vol, tmp_path / "a.nii")
    back = read_volume(tmp_path / "a.nii")
    assert back.data.dtype == np.float32
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == vol.spacing
    # Re-encoding what was read reproduces the same file.
    assert encode_volume(back) == (tmp_path / "a.nii").read_bytes()


def test_round_trip_int16_and_labels(tmp_path, rng):
    vol = Volume3D(rng.integers(-500, 500, size=(2, 3, 4)).astype(np.int16))
    write_volume(vol, tmp_path / "i.nii")
    back = read_volume(tmp_path / "i.nii")
    assert back.data.dtype == np.int16 and np.array_equal(back.data, vol.data)

    labels = SegmentationMap(rng.choice([0, 1, 2, 4], size=(4, 3, 2)).astype(np.uint8))
    write_volume(labels, tmp_path / "s.nii")
    seg = read_labels(tmp_path / "s.nii")
    assert np.array_equal(seg.labels, labels.labels)


def test_nibabel_reads_our_files(tmp_path, rng):
    vol = _volume(rng)
    write_volume(vol, tmp_path / "a.nii")
    img = nib.load(str(tmp_path / "a.nii"))
    # nibabel exposes (x, y, z); our arrays are (z, y, x).
    np.testing.assert_array_equal(np.asarray(img.dataobj).transpose(2, 1, 0), vol.data)
    np.testing.assert_allclose(img.header.get_zooms(), vol.spacing[::-1])


def test_we_read_nibabel_files(tmp_path, rng):
    data_xyz = rng.normal(size=(5, 4, 3)).astype(np.float32)
    img = nib.Nifti1Image(data_xyz, np.diag([0.5, 1.25, 2.5, 1.0]))
    nib.save(img, str(tmp_path / "n.nii"))
    vol = read_volume(tmp_path / "n.nii")
    np.testing.assert_array_equal(vol.data, data_xyz.transpose(2, 1, 0))
    assert vol.spacing == (2.5, 1.25, 0.5)


def test_scaling_applied(tmp_path):
    data_xyz = np.arange(24, dtype=np.int16).reshape(4, 3, 2)
    img = nib.Nifti1Image(data_xyz, np.eye(4))
    img.header.set_slope_inter(2.0, -1.0)
    nib.save(img, str(tmp_path / "s.nii"))
    vol = read_volume(tmp_path / "s.nii")
    np.testing.assert_allclose(vol.data, data_xyz.transpose(2, 1, 0) * 2.0 - 1.0)


def test_orientation_bytes_preserved(tmp_path, rng):
    img = nib.Nifti1Image(rng.normal(size=(2, 3, 4)).astype(np.float32), np.diag([-1.0, 1.0, 1.0, 1.0]))
    img.header.set_qform(np.diag([-1.0, 1.0, 1.0, 1.0]), code=1)
    nib.save(img, str(tmp_path / "o.nii"))
    vol = read_volume(tmp_path / "o.nii")
    write_volume(vol, tmp_path / "o2.nii")
    a = (tmp_path / "o.nii").read_bytes()[252:328]
    b = (tmp_path / "o2.nii").read_bytes()[252:328]
    assert a == b


def test_bad_magic(tmp_path, rng):
    write_volume(_volume(rng), tmp_path / "a.nii")
    raw = bytearray((tmp_path / "a.nii").read_bytes())
    raw[344:348] = b"xxxx"
    (tmp_path / "b.nii").write_bytes(bytes(raw))
    with pytest.raises(NiftiError, match="not a NIfTI-1 file"):
        read_volume(tmp_path / "b.nii")


def test_truncated_payload(tmp_path, rng):
    write_volume(_volume(rng), tmp_path / "a.nii")
    raw = (tmp_path / "a.nii").read_bytes()
    (tmp_path / "t.nii").write_bytes(raw[:-8])
    with pytest.raises(NiftiError, match="expected 240 bytes, found 232"):
        read_volume(tmp_path / "t.nii")


def test_unsupported_datatype(tmp_path, rng):
    write_volume(_volume(rng), tmp_path / "a.nii")
    raw = bytearray((tmp_path / "a.nii").read_bytes())
    struct.pack_into("<h", raw, 70, 64)
    (tmp_path / "d.nii").write_bytes(bytes(raw))
    with pytest.raises(NiftiError, match="datatype code 64"):
        read_volume(tmp_path / "d.nii")


def test_4d_rejected(tmp_path):
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2, 2), np.float32), np.eye(4)), str(tmp_path / "4d.nii"))
    with pytest.raises(NiftiError, match="3D"):
        read_volume(tmp_path / "4d.nii")


def test_label_file_with_bad_codes(tmp_path):
    write_volume(Volume3D(np.full((2, 2, 2), 3, dtype=np.int16)), tmp_path / "bad.nii")
    with pytest.raises(VolumeError, match="label value 3"):
        read_labels(tmp_path / "bad.nii")


def test_weight_store_round_trip(tmp_path, rng):
    store = WeightStore()
    store.add("a.weight", rng.normal(size=(2, 3, 1, 3, 3)))
    store.add("a.bias", rng.normal(size=(2,)))
    store.add("scalar", np.float32(1.5))
    write_weights(store, tmp_path / "w")
    back = read_weights(tmp_path / "w")
    assert back.names() == store.names()
    for n in store.names():
        assert back[n].tobytes() == store[n].tobytes()
        assert back[n].shape == store[n].shape
    write_weights(back, tmp_path / "w2")
    assert (tmp_path / "w.blob").read_bytes() == (tmp_path / "w2.blob").read_bytes()
    assert (tmp_path / "w.manifest").read_text() == (tmp_path / "w2.manifest").read_text()


def test_weight_store_rejects_duplicates_and_unknown():
    store = WeightStore({"x": np.zeros(2)})
    with pytest.raises(WeightStoreError, match="duplicate"):
        store.add("x", np.zeros(2))
    with pytest.raises(KeyError, match="'y'"):
        store["y"]


def test_weight_store_checksum_mismatch(tmp_path):
    write_weights(WeightStore({"x": np.arange(4.0)}), tmp_path / "w")
    blob = bytearray((tmp_path / "w.blob").read_bytes())
    blob[0] ^= 0xFF
    (tmp_path / "w.blob").write_bytes(bytes(blob))
    with pytest.raises(WeightStoreError, match="checksum mismatch for tensor 'x'"):
        read_weights(tmp_path / "w")


def test_weight_store_bad_header_and_size(tmp_path):
    write_weights(WeightStore({"x": np.arange(4.0)}), tmp_path / "w")
    text = (tmp_path / "w.manifest").read_text()
    (tmp_path / "w.manifest").write_text(text.replace("glioseg-weights", "other"))
    with pytest.raises(WeightStoreError, match="header"):
        read_weights(tmp_path / "w")
    (tmp_path / "w.manifest").write_text(text)
    (tmp_path / "w.blob").write_bytes((tmp_path / "w.blob").read_bytes() + b"\0\0\0\0")
    with pytest.raises(WeightStoreError, match="blob has 20 bytes"):
        read_weights(tmp_path / "w")


def test_weight_store_missing_blob(tmp_path):
    write_weights(WeightStore({"x": np.arange(4.0)}), tmp_path / "w")
    (tmp_path / "w.blob").unlink()
    with pytest.raises(WeightStoreError, match="not found"):
        read_weights(tmp_path / "w")
