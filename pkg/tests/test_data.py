import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedaf.data import (
    BadMagicError,
    CountMismatchError,
    LabeledDataset,
    PartitionSpec,
    TruncatedFileError,
    class_templates,
    dirichlet_partition,
    load_idx,
    normalize,
    quantize,
    synth_blobs,
    write_idx,
)


def _idx_pair(tmp_path, pixels: bytes, n_img: int, rows: int, cols: int, labels: bytes, magic=0x803):
    img = tmp_path / "img.idx"
    lbl = tmp_path / "lbl.idx"
    img.write_bytes(struct.pack(">4I", magic, n_img, rows, cols) + pixels)
    lbl.write_bytes(struct.pack(">2I", 0x801, len(labels)) + labels)
    return img, lbl


def test_load_hand_built_pair(tmp_path):
    img, lbl = _idx_pair(tmp_path, bytes([0, 1, 2, 3, 250, 251, 252, 255]), 2, 2, 2, bytes([1, 0]))
    ds = load_idx(img, lbl)
    assert len(ds) == 2 and ds.images.shape == (2, 1, 2, 2)
    assert ds.images.tobytes() == bytes([0, 1, 2, 3, 250, 251, 252, 255])
    assert ds.labels.tolist() == [1, 0]


def test_count_mismatch(tmp_path):
    img, lbl = _idx_pair(tmp_path, bytes(8), 2, 2, 2, bytes([1, 0, 1]))
    with pytest.raises(CountMismatchError):
        load_idx(img, lbl)


def test_bad_magic(tmp_path):
    img, lbl = _idx_pair(tmp_path, bytes(8), 2, 2, 2, bytes([1, 0]), magic=0x801)
    with pytest.raises(BadMagicError):
        load_idx(img, lbl)


def test_truncated(tmp_path):
    img, lbl = _idx_pair(tmp_path, bytes(7), 2, 2, 2, bytes([1, 0]))
    with pytest.raises(TruncatedFileError):
        load_idx(img, lbl)
    (tmp_path / "short").write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        load_idx(tmp_path / "short", lbl)


def test_error_kinds_are_distinct():
    assert len({BadMagicError, TruncatedFileError, CountMismatchError}) == 3
    assert not issubclass(BadMagicError, TruncatedFileError)


def test_reserialization_is_byte_exact(tmp_path):
    rng = np.random.default_rng(0)
    img, lbl = _idx_pair(tmp_path, rng.integers(0, 256, 5 * 3 * 4).astype(np.uint8).tobytes(), 5, 3, 4, bytes([0, 1, 2, 1, 0]))
    ds = load_idx(img, lbl)
    write_idx(ds, tmp_path / "img2", tmp_path / "lbl2")
    assert (tmp_path / "img2").read_bytes() == img.read_bytes()
    assert (tmp_path / "lbl2").read_bytes() == lbl.read_bytes()


def test_multichannel_round_trip(tmp_path):
    ds = synth_blobs(3, 4, 6, 0.1, seed=1, channels=3)
    write_idx(ds, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l", num_classes=3)
    assert back.images.shape == (12, 3, 6, 6)
    np.testing.assert_array_equal(back.images, ds.images)


def test_noise_free_blobs_equal_template():
    ds = synth_blobs(4, 5, 8, 0.0, seed=3)
    templates = quantize(class_templates(4, 8))
    for c in range(4):
        assert np.all(ds.images[ds.labels == c] == templates[c])


def test_blob_count_and_labels():
    ds = synth_blobs(5, 7, 6, 0.2, seed=0)
    assert len(ds) == 35
    assert np.bincount(ds.labels).tolist() == [7] * 5


def test_templates_pairwise_distinct():
    for classes in (2, 3, 10):
        t = quantize(class_templates(classes, 8)).reshape(classes, -1)
        for a in range(classes):
            for b in range(a + 1, classes):
                assert np.any(t[a] != t[b])


def test_splits_share_templates_but_not_noise():
    a = synth_blobs(3, 10, 8, 0.2, seed=4, split="train")
    b = synth_blobs(3, 10, 8, 0.2, seed=4, split="test")
    assert not np.array_equal(a.images, b.images)
    np.testing.assert_array_equal(synth_blobs(3, 10, 8, 0.0, 4, split="train").images, synth_blobs(3, 10, 8, 0.0, 4, split="test").images)


def test_synth_rejects_degenerate_sizes():
    with pytest.raises(ValueError):
        synth_blobs(1, 5, 8, 0.1, 0)
    with pytest.raises(ValueError):
        synth_blobs(3, 0, 8, 0.1, 0)


def test_blobs_are_linearly_separable():
    # centralized softmax-regression oracle, full-batch gradient descent
    ds = synth_blobs(3, 200, 8, 0.05, seed=0)
    x = normalize(ds.images).reshape(len(ds), -1).astype(np.float64)
    x = np.hstack([x - x.mean(axis=0), np.ones((len(ds), 1))])
    y = np.eye(3)[ds.labels]
    w = np.zeros((x.shape[1], 3))
    for _ in range(300):
        z = x @ w
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        w -= 0.5 * x.T @ (p - y) / len(ds)
    assert np.mean(np.argmax(x @ w, axis=1) == ds.labels) >= 0.99


def test_normalize_endpoints_and_mid():
    out = normalize(np.array([0, 128, 255], dtype=np.uint8))
    assert out[0] == 0.0 and out[2] == 1.0
    assert out[1] == np.float32(128 / 255)


def test_quantize_normalize_round_trip_all_bytes():
    x = np.arange(256, dtype=np.uint8)
    np.testing.assert_array_equal(quantize(normalize(x)), x)


def test_quantize_clamps():
    np.testing.assert_array_equal(quantize(np.array([-0.5, 1.7])), [0, 255])


def _check_partition(ds, shards):
    all_idx = np.concatenate([s.indices for s in shards])
    assert len(all_idx) == len(ds)
    assert np.array_equal(np.sort(all_idx), np.arange(len(ds)))
    for s in shards:
        assert np.array_equal(s.class_counts, np.bincount(ds.labels[s.indices], minlength=ds.num_classes))
        assert s.class_counts.sum() == len(s)


@settings(max_examples=40, deadline=None)
@given(
    alpha=st.floats(0.02, 10.0),
    clients=st.integers(1, 16),
    seed=st.integers(0, 2**31),
    classes=st.integers(2, 6),
)
def test_partition_is_disjoint_and_exhaustive(alpha, clients, seed, classes):
    ds = synth_blobs(classes, 20, 2, 0.0, seed=0)
    _check_partition(ds, dirichlet_partition(ds, PartitionSpec(alpha, clients, seed, max_redraws=50)))


def test_partition_is_deterministic():
    ds = synth_blobs(4, 50, 2, 0.0, seed=0)
    a = dirichlet_partition(ds, PartitionSpec(0.1, 5, 9))
    b = dirichlet_partition(ds, PartitionSpec(0.1, 5, 9))
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_huge_alpha_is_balanced(seed):
    ds = synth_blobs(2, 500, 2, 0.0, seed=0)
    shards = dirichlet_partition(ds, PartitionSpec(1e6, 2, seed))
    for s in shards:
        assert abs(len(s) - 500) <= 25
        assert abs(s.class_counts[0] - s.class_counts[1]) <= 25


def test_single_client_gets_everything():
    ds = synth_blobs(3, 10, 2, 0.0, seed=0)
    (shard,) = dirichlet_partition(ds, PartitionSpec(0.5, 1, 0))
    np.testing.assert_array_equal(shard.indices, np.arange(len(ds)))


def test_small_alpha_skews_labels():
    ds = synth_blobs(3, 300, 2, 0.0, seed=0)
    shards = dirichlet_partition(ds, PartitionSpec(0.05, 4, 0))
    # most clients own a single dominant class
    dominant = [s.class_counts.max() / max(len(s), 1) for s in shards]
    assert np.median(dominant) > 0.8


def test_min_samples_is_enforced():
    ds = synth_blobs(2, 10, 2, 0.0, seed=0)
    for seed in range(10):
        shards = dirichlet_partition(ds, PartitionSpec(0.02, 4, seed, min_samples=1))
        assert min(len(s) for s in shards) >= 1


def test_impossible_min_samples_warns(caplog):
    ds = synth_blobs(2, 3, 2, 0.0, seed=0)
    with caplog.at_level(logging.WARNING):
        shards = dirichlet_partition(ds, PartitionSpec(1.0, 4, 0, min_samples=5, max_redraws=3))
    assert "redraws" in caplog.text
    _check_partition(ds, shards)


def test_partition_spec_validation():
    with pytest.raises(ValueError):
        PartitionSpec(0.0, 2, 0)
    with pytest.raises(ValueError):
        PartitionSpec(1.0, 0, 0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 1, 2, 2), dtype=np.float32), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 1, 2, 2), dtype=np.uint8), np.array([0, 2]), 2)
