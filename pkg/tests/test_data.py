import struct

import numpy as np
import pytest

from deltanets.data import (DataError, Dataset, load_idx, nearest_centroid_accuracy, read_idx_images, split_classes,
                            standardize, synth_tasks, write_idx)


@pytest.fixture
def idx_pair(tmp_path):
    imgs = np.array([[[0, 255], [128, 1]], [[10, 20], [30, 40]]], dtype=np.uint8)
    labels = np.array([3, 7], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(ip, lp, imgs, labels)
    return ip, lp, imgs, labels


def test_fixture_pixels_are_bytes_over_255(idx_pair):
    ip, lp, imgs, labels = idx_pair
    ds = load_idx(ip, lp)
    assert ds.images.shape == (2, 1, 2, 2) and ds.images.dtype == np.float32
    assert np.array_equal(ds.images[:, 0], imgs.astype(np.float32) / np.float32(255))
    assert ds.images[0, 0, 0, 1] == 1.0 and list(ds.labels) == [3, 7]


def test_handcrafted_header_bytes(tmp_path):
    raw = struct.pack(">IIII", 0x803, 1, 2, 3) + bytes([0, 51, 102, 153, 204, 255])
    (tmp_path / "i").write_bytes(raw)
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 1) + bytes([4]))
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.allclose(ds.images[0, 0].ravel(), [0, 0.2, 0.4, 0.6, 0.8, 1.0])


def test_ten_thousand_item_header(tmp_path):
    n = 10_000
    write_idx(tmp_path / "i", tmp_path / "l", np.zeros((n, 28, 28), np.uint8), np.zeros(n, np.uint8))
    imgs = read_idx_images(tmp_path / "i")
    assert imgs.shape == (10_000, 28, 28)


def test_bad_magic_names_offset(tmp_path):
    (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x999, 1, 1, 1) + b"\x00")
    with pytest.raises(DataError, match="byte 0"):
        read_idx_images(tmp_path / "i")


def test_truncated_payload(idx_pair):
    ip = idx_pair[0]
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(DataError, match="truncated"):
        read_idx_images(ip)


def test_truncated_header(tmp_path):
    (tmp_path / "i").write_bytes(struct.pack(">II", 0x803, 1))
    with pytest.raises(DataError, match="truncated header"):
        read_idx_images(tmp_path / "i")


def test_dimension_overflow(tmp_path):
    (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x803, 0xFFFFFFFF, 28, 28))
    with pytest.raises(DataError, match="byte 4"):
        read_idx_images(tmp_path / "i")


def test_length_mismatch(tmp_path):
    write_idx(tmp_path / "i", tmp_path / "l", np.zeros((3, 2, 2), np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(DataError):
        load_idx(tmp_path / "i", tmp_path / "l")


def _ten_class(n_per=4):
    labels = np.repeat(np.arange(10), n_per)
    images = np.random.default_rng(0).normal(size=(len(labels), 1, 4, 4)).astype(np.float32)
    return Dataset("ten", "train", images, labels, 10)


def test_split_classes_partition_and_remap():
    ds = _ten_class()
    a, b = split_classes(ds, [range(5), range(5, 10)])
    assert a.class_count == b.class_count == 5
    assert len(a) + len(b) == len(ds)
    idx7 = np.flatnonzero(ds.labels == 7)
    assert np.all(b.labels[np.isin(np.flatnonzero(ds.labels >= 5), idx7)] == 2)


def test_split_classes_rejects_overlap():
    with pytest.raises(DataError):
        split_classes(_ten_class(), [[0, 1, 2], [2, 3]])


def test_standardize_uses_train_stats_only():
    tr, te = _ten_class(), _ten_class()
    te = Dataset("te", "test", te.images * 10 + 5, te.labels, 10)
    s_tr, s_te = standardize(tr, te)
    assert abs(s_tr.images.mean()) < 1e-6 and abs(s_tr.images.std() - 1) < 1e-5
    mean, std = s_tr.stats
    assert np.allclose(s_te.images, (te.images - mean[0]) / std[0], atol=1e-5)


def test_synth_tasks_deterministic_balanced_and_nontrivial():
    a = synth_tasks(11, 2, 5, 30, 16, test_per_class=20)
    b = synth_tasks(11, 2, 5, 30, 16, test_per_class=20)
    for (tra, tea), (trb, teb) in zip(a, b):
        assert tra.images.tobytes() == trb.images.tobytes() and np.array_equal(tea.labels, teb.labels)
        assert np.array_equal(np.bincount(tra.labels), np.full(5, 30))
        assert nearest_centroid_accuracy(tra, tea) < 95.0 / 100
    assert not np.array_equal(a[0][0].images, synth_tasks(12, 2, 5, 30, 16)[0][0].images)


def test_synth_task_class_pools_disjoint():
    tasks = synth_tasks(2, 3, 5, 10, 16)
    means = [np.stack([tr.images[tr.labels == c].mean(axis=0) for c in range(5)]) for tr, _ in tasks]
    assert not np.allclose(means[0], means[1])


def test_synth_rejects_oversized_request():
    with pytest.raises(DataError):
        synth_tasks(0, 10, 5, 10, 16)
