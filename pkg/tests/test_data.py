import json

import numpy as np
import pytest

from cganet.data import (PhantomSpec, VolumeFormatError, augment, generate_phantom, load_case, read_manifest,
                         read_volume, write_dataset, write_volume)
from cganet.sam import LabelError, channels_to_labels, onehot


def test_float_volume_round_trip_is_bitwise(tmp_path):
    v = np.random.default_rng(0).standard_normal((4, 8, 8, 8)).astype(np.float32)
    write_volume(tmp_path / "v.cgav", v)
    back = read_volume(tmp_path / "v.cgav")
    assert back.dtype == np.float32 and back.tobytes() == v.tobytes()


def test_label_volume_round_trip(tmp_path):
    labels = np.random.default_rng(1).choice(np.array([0, 1, 2, 4], np.uint8), size=(6, 7, 8))
    write_volume(tmp_path / "l.cgav", labels)
    back = read_volume(tmp_path / "l.cgav")
    assert back.shape == (1, 6, 7, 8) and back.dtype == np.uint8
    assert np.array_equal(back[0], labels)


def test_corrupt_files_raise(tmp_path):
    path = tmp_path / "v.cgav"
    write_volume(path, np.zeros((2, 4, 4, 4), np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(VolumeFormatError, match=r"expected 512 bytes, found 502"):
        read_volume(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(VolumeFormatError, match="magic"):
        read_volume(path)
    path.write_bytes(raw[:4] + b"\x09\x00" + raw[6:])
    with pytest.raises(VolumeFormatError, match="version"):
        read_volume(path)
    path.write_bytes(raw[:5])
    with pytest.raises(VolumeFormatError, match="header"):
        read_volume(path)
    with pytest.raises(ValueError):
        write_volume(path, np.zeros((4, 4, 4), np.float64))


def test_phantom_is_deterministic_and_nested():
    spec = PhantomSpec(seed=5)
    img1, lab1 = generate_phantom(spec)
    img2, lab2 = generate_phantom(spec)
    assert np.array_equal(img1, img2) and np.array_equal(lab1, lab2)
    assert img1.shape == (4, 32, 32, 32) and img1.dtype == np.float32
    assert set(np.unique(lab1)) == {0, 1, 2, 4}
    # each inner structure lies inside the region made of itself and its enclosing structure
    from scipy import ndimage
    core = lab1 == 4
    tumour_core = np.isin(lab1, (1, 4))
    assert not (ndimage.binary_dilation(core) & (lab1 == 0)).any()
    assert not (ndimage.binary_dilation(tumour_core) & (lab1 == 0)).any()
    np.testing.assert_allclose(img1.mean(axis=(1, 2, 3)), 0.0, atol=1e-5)


def test_centered_sphere_matches_analytic_mask():
    spec = PhantomSpec(extent=32, placement="center", edema_radius=(8.0, 8.0), shell_probability=0.0,
                       noise=0.0, normalize=False)
    _, labels = generate_phantom(spec)
    i, j, k = np.indices((32, 32, 32))
    sphere = (i - 16) ** 2 + (j - 16) ** 2 + (k - 16) ** 2 <= 64
    assert np.array_equal(labels == 2, sphere) and not np.isin(labels, (1, 4)).any()


def test_phantom_spec_errors():
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(extent=16, edema_radius=(6.0, 9.0)))
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(extent=8))


def test_augment_properties():
    img, lab = generate_phantom(PhantomSpec(seed=1))
    a_img, a_lab = augment(img, lab, np.random.default_rng(3), crop=24)
    b_img, b_lab = augment(img, lab, np.random.default_rng(3), crop=24)
    assert np.array_equal(a_img, b_img) and np.array_equal(a_lab, b_lab)
    assert a_img.shape == (4, 24, 24, 24) and a_lab.shape == (24, 24, 24)
    # no crop and flips forced: class counts are exact and intensities stay in range
    f_img, f_lab = augment(img, lab, np.random.default_rng(4), flip_p=1.0)
    assert np.array_equal(np.bincount(f_lab.ravel(), minlength=5), np.bincount(lab.ravel(), minlength=5))
    assert np.array_equal(f_lab, lab[::-1, ::-1, ::-1])
    unflipped = f_img[:, ::-1, ::-1, ::-1]
    ratio = unflipped.std(axis=(1, 2, 3)) / img.std(axis=(1, 2, 3))
    assert np.all((ratio >= 0.9 - 1e-5) & (ratio <= 1.1 + 1e-5))
    with pytest.raises(ValueError):
        augment(img, lab, np.random.default_rng(0), crop=40)


def test_double_flip_is_identity():
    lab = np.random.default_rng(5).integers(0, 3, (4, 5, 6)).astype(np.uint8)
    assert np.array_equal(np.flip(np.flip(lab, 1), 1), lab)
    img = np.zeros((1, 4, 5, 6), np.float32)
    _, out = augment(img, lab, np.random.default_rng(0), flip_p=0.0, shift=0.0, scale=(1.0, 1.0))
    assert np.array_equal(out, lab)


def test_onehot_round_trip_and_counts():
    labels = np.random.default_rng(6).choice(np.array([0, 1, 2, 4], np.uint8), size=(5, 5, 5))
    oh = onehot(labels)
    assert np.array_equal(channels_to_labels(oh.argmax(axis=0)), labels)
    assert np.all(oh.sum(axis=0) == 1)
    for ch, label in enumerate((0, 1, 2, 4)):
        assert oh[ch].sum() == (labels == label).sum()
    with pytest.raises(LabelError):
        onehot(np.array([[[3]]]))


def test_dataset_layout_and_folds(tmp_path):
    root = write_dataset(tmp_path / "ds", 6, PhantomSpec(seed=2), folds=3, seed=1)
    manifest = read_manifest(root)
    assert [c["id"] for c in manifest["cases"]] == [f"{i:03d}" for i in range(6)]
    assert sorted(c["fold"] for c in manifest["cases"]) == [0, 0, 1, 1, 2, 2]
    image, labels = load_case(root, "004")
    ref_img, ref_lab = generate_phantom(PhantomSpec(seed=2 * 100003 + 4))
    assert np.array_equal(image, ref_img) and np.array_equal(labels, ref_lab)
    json.dumps(manifest)
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path)
