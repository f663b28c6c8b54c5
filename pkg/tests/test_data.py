import gzip
import struct

import numpy as np
import pytest

from xpruner.data import Dataset, load_idx, nearest_template_accuracy, synth_dataset, write_idx
from xpruner.errors import BadMagicError, CountMismatchError, TruncatedFileError


def test_synthetic_is_seeded_and_balanced():
    a = synth_dataset(3, 3, 10, 16)
    b = synth_dataset(3, 3, 10, 16)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (30, 1, 16, 16)
    assert np.bincount(a.labels).tolist() == [10, 10, 10]
    assert 0.0 <= a.images.min() and a.images.max() <= 1.0
    assert not np.array_equal(a.images, synth_dataset(4, 3, 10, 16).images)


def test_splits_use_different_noise():
    tr = synth_dataset(0, 3, 10, 16, split="train")
    te = synth_dataset(0, 3, 10, 16, split="test")
    assert not np.array_equal(tr.images, te.images)


def test_synthetic_task_is_separable():
    assert nearest_template_accuracy(synth_dataset(0, 3, 50, 32)) > 0.95


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 3]), 3)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 4, 4), 1.5), np.array([0]), 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 1, 4, 4)), np.zeros(0), 3)


# -- IDX -------------------------------------------------------------------------------------

def hand_fixture(tmp_path):
    """Two 2x3 images written byte by byte."""
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3]) + bytes([0, 51, 102, 153, 204, 255] * 2))
    lab.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 2, 1, 0]))
    return img, lab


def test_idx_hand_fixture(tmp_path):
    ds = load_idx(*hand_fixture(tmp_path), num_classes=2)
    assert ds.images.shape == (2, 1, 2, 3)
    np.testing.assert_allclose(ds.images[0, 0], [[0.0, 0.2, 0.4], [0.6, 0.8, 1.0]])
    assert ds.labels.tolist() == [1, 0]


def test_idx_round_trip_and_gzip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(4, 5, 5), dtype=np.uint8)
    labels = np.array([0, 2, 1, 2], dtype=np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", images, labels)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal((ds.images[:, 0] * 255).round().astype(np.uint8), images)
    assert ds.num_classes == 3
    (tmp_path / "i.gz").write_bytes(gzip.compress((tmp_path / "i").read_bytes()))
    np.testing.assert_array_equal(load_idx(tmp_path / "i.gz", tmp_path / "l").images, ds.images)


def test_idx_bad_magic(tmp_path):
    img, lab = hand_fixture(tmp_path)
    raw = bytearray(img.read_bytes())
    raw[3] = 9
    img.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError) as info:
        load_idx(img, lab)
    assert info.value.offset == 0 and str(img) in str(info.value)


def test_idx_truncated_payload(tmp_path):
    img, lab = hand_fixture(tmp_path)
    img.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(TruncatedFileError) as info:
        load_idx(img, lab)
    assert info.value.offset == 27


def test_idx_truncated_header(tmp_path):
    img, lab = hand_fixture(tmp_path)
    img.write_bytes(img.read_bytes()[:10])
    with pytest.raises(TruncatedFileError) as info:
        load_idx(img, lab)
    assert info.value.offset == 10


def test_idx_count_mismatch(tmp_path):
    img, lab = hand_fixture(tmp_path)
    lab.write_bytes(struct.pack(">II", 0x801, 3) + bytes([0, 1, 0]))
    with pytest.raises(CountMismatchError) as info:
        load_idx(img, lab)
    assert info.value.offset == 4 and info.value.path == str(lab)
