import struct
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camri.data import (
    IDX_IMAGES_MAGIC,
    Dataset,
    load_csv,
    load_idx,
    make_blobs,
    normalize_pixels,
    save_csv,
    split,
    split_indices,
    write_idx,
)
from camri.errors import ConsistencyError, DataIOError, FormatError, InvalidInputError
from camri.experiment import run_trial
from camri.network import ModelConfig, TrainConfig


def test_blobs_deterministic():
    a = make_blobs(3, 20, 4, seed=5)
    b = make_blobs(3, 20, 4, seed=5)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.X, make_blobs(3, 20, 4, seed=6).X)
    assert list(a.class_counts()) == [20, 20, 20]


def test_blobs_tiny_sigma_are_point_classes():
    ds = make_blobs(4, 10, 3, sigma=1e-9, seed=0)
    for k in range(4):
        rows = ds.X[ds.labels == k]
        assert np.ptp(rows, axis=0).max() < 1e-7
    # Centers are distinct, so a nearest-center rule separates every class.
    centers = np.array([ds.X[ds.labels == k].mean(axis=0) for k in range(4)])
    pred = np.argmin(((ds.X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(pred, ds.labels)


def test_blobs_overlap_moves_center():
    plain = make_blobs(3, 400, 2, sigma=0.1, seed=0)
    shifted = make_blobs(3, 400, 2, sigma=0.1, overlap=(0, 1, 0.6), seed=0)
    c0 = shifted.X[shifted.labels == 0].mean(axis=0)
    p0 = plain.X[plain.labels == 0].mean(axis=0)
    p1 = plain.X[plain.labels == 1].mean(axis=0)
    np.testing.assert_allclose(c0, p0 + 0.6 * (p1 - p0), atol=0.05)


def test_overlap_makes_pair_worst_for_ce():
    ds = make_blobs(3, 200, 8, overlap=(0, 1, 0.6), seed=0)
    mc = ModelConfig(input_dim=8, hidden=(32, 32), feature_dim=8, n_classes=3)
    worst = [int(np.argmin(run_trial(ds, mc, TrainConfig(epochs=20), "ce", {}, s).recalls)) for s in range(5)]
    assert sum(w in (0, 1) for w in worst) >= 4


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(7, 4, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    write_idx(images, labels, tmp_path / "img", tmp_path / "lbl")
    ds = load_idx(tmp_path / "img", tmp_path / "lbl", K=10)
    np.testing.assert_array_equal(ds.X, images.reshape(7, -1))
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.input_dim == 12 and ds.K == 10


def test_idx_header_shape(tmp_path):
    images = np.zeros((3, 28, 28), dtype=np.uint8)
    write_idx(images, np.array([0, 9, 1], dtype=np.uint8), tmp_path / "i", tmp_path / "l")
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert (len(ds), ds.input_dim, ds.K) == (3, 784, 10)


def test_idx_bad_magic(tmp_path):
    write_idx(np.zeros((2, 2, 2), dtype=np.uint8), np.zeros(2, dtype=np.uint8), tmp_path / "i", tmp_path / "l")
    raw = bytearray((tmp_path / "i").read_bytes())
    raw[:4] = struct.pack(">I", 0xDEADBEEF)
    (tmp_path / "i").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_count_mismatch(tmp_path):
    write_idx(np.zeros((2, 2, 2), dtype=np.uint8), np.zeros(3, dtype=np.uint8), tmp_path / "i", tmp_path / "l")
    with pytest.raises(ConsistencyError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_truncated(tmp_path):
    write_idx(np.zeros((2, 2, 2), dtype=np.uint8), np.zeros(2, dtype=np.uint8), tmp_path / "i", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "i").write_bytes(raw[:-3])
    with pytest.raises(DataIOError):
        load_idx(tmp_path / "i", tmp_path / "l")
    (tmp_path / "i").write_bytes(struct.pack(">I", IDX_IMAGES_MAGIC))
    with pytest.raises(DataIOError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_normalize_pixels():
    ds = Dataset(np.array([[0.0, 255.0, 51.0]]), np.array([0]), 2)
    norm = normalize_pixels(ds)
    np.testing.assert_array_equal(norm.X, [[0.0, 1.0, 0.2]])
    assert norm.normalized
    with pytest.raises(InvalidInputError):
        normalize_pixels(norm)


@given(st.lists(st.integers(0, 255), min_size=1, max_size=30))
def test_normalized_range(values):
    ds = Dataset(np.array(values, dtype=float)[:, None], np.zeros(len(values), dtype=int), 1)
    X = normalize_pixels(ds).X
    assert X.min() >= 0.0 and X.max() <= 1.0


def test_split_stratified_counts():
    ds = make_blobs(2, 50, 3, seed=0)
    tr, te = split(ds, 0.7, 1)
    assert list(tr.class_counts()) == [35, 35]
    assert list(te.class_counts()) == [15, 15]
    tr2, _ = split(ds, 0.7, 1)
    np.testing.assert_array_equal(tr.X, tr2.X)


def test_split_warns_on_tiny_class():
    ds = Dataset(np.arange(6.0)[:, None], np.array([0, 0, 0, 0, 0, 1]), 2)
    with pytest.warns(UserWarning):
        tr, te = split(ds, 0.5, 0)
    assert len(tr) + len(te) == 6


@given(st.integers(0, 10_000), st.integers(2, 5), st.floats(0.1, 0.9))
def test_split_is_a_partition(seed, K, frac):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, K, size=int(rng.integers(10, 80)))
    ds = Dataset(rng.normal(size=(len(labels), 2)), labels, K)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        tr, te = split_indices(ds, frac, seed)
    assert len(np.intersect1d(tr, te)) == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([tr, te])), np.arange(len(ds)))


def test_csv_round_trip(tmp_path):
    ds = make_blobs(3, 5, 2, seed=1)
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_csv_errors(tmp_path):
    (tmp_path / "a.csv").write_text("x,f0\n0,1\n")
    with pytest.raises(FormatError):
        load_csv(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("label,f0\n0,1,2\n")
    with pytest.raises(FormatError):
        load_csv(tmp_path / "b.csv")


def test_dataset_validation():
    with pytest.raises(InvalidInputError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(InvalidInputError):
        Dataset(np.array([[np.nan]]), np.array([0]), 1)
