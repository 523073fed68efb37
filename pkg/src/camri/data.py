"""Datasets: Gaussian blobs, IDX digit files, CSV import/export, splits."""

import csv
import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np

from camri.errors import ConsistencyError, DataIOError, FormatError, InvalidInputError
from camri.numerics import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    labels: np.ndarray
    K: int
    name: str = "dataset"
    normalized: bool = False

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or labels.shape != (X.shape[0],):
            raise InvalidInputError(f"X {X.shape} and labels {labels.shape} do not align")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.K):
            raise InvalidInputError(f"labels must lie in 0..{self.K - 1}")
        if not np.all(np.isfinite(X)):
            raise InvalidInputError("X contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self):
        return self.X.shape[1]

    def subset(self, idx, name=None):
        return replace(self, X=self.X[idx], labels=self.labels[idx], name=name or self.name)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.K)


def _circle_centers(K, dim, radius):
    """K centers spaced evenly on a circle in the first two coordinates."""
    centers = np.zeros((K, dim))
    angles = 2 * np.pi * np.arange(K) / K
    centers[:, 0] = radius * np.cos(angles)
    if dim > 1:
        centers[:, 1] = radius * np.sin(angles)
    return centers


def make_blobs(K, per_class, input_dim, center_radius=3.0, sigma=1.0, overlap=None, seed=0):
    """Isotropic Gaussian classes around centers on a circle.

    ``overlap=(a, b, shift)`` moves class a's center toward class b's by the
    fraction ``shift`` of their distance, producing a hard pair.
    """
    if K < 2:
        raise InvalidInputError("need at least two classes")
    if not sigma > 0:
        raise InvalidInputError("sigma must be positive")
    centers = _circle_centers(K, input_dim, center_radius)
    if overlap is not None:
        a, b, shift = overlap
        centers[int(a)] = centers[int(a)] + float(shift) * (centers[int(b)] - centers[int(a)])
    rng = make_rng(seed)
    labels = np.repeat(np.arange(K), per_class)
    X = centers[labels] + sigma * rng.standard_normal((K * per_class, input_dim))
    return Dataset(X, labels, K, name="blobs")


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise DataIOError(f"{path}: truncated file (wanted {n} bytes, got {len(data)})")
    return data


def _read_idx(path, expected_magic):
    with open(path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, path))
        if magic != expected_magic:
            raise FormatError(f"{path}: magic 0x{magic:08X}, expected 0x{expected_magic:08X}")
        ndim = 3 if expected_magic == IDX_IMAGES_MAGIC else 1
        dims = struct.unpack(">" + "I" * ndim, _read_exact(fh, 4 * ndim, path))
        size = int(np.prod(dims))
        payload = _read_exact(fh, size, path)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, K=None, name="idx"):
    """Read an IDX image/label file pair (raw byte values, not yet normalized).

    ``K`` defaults to the largest label plus one.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64)
    if K is None:
        K = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(X, labels.astype(np.int64), K, name=name)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (N, rows, cols) and labels (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def normalize_pixels(ds):
    """Scale byte-valued pixels to [0, 1]. Refuses already-normalized data."""
    if ds.normalized:
        raise InvalidInputError(f"dataset {ds.name!r} is already normalized")
    return replace(ds, X=ds.X / 255.0, normalized=True)


def split(ds, train_fraction, seed):
    """Stratified, seeded train/test partition.

    Each class contributes ``round(n_k * train_fraction)`` samples to the
    training part. Falls back to a global shuffle (with a warning) if some
    class has fewer than two samples.
    """
    if not 0 < train_fraction < 1:
        raise InvalidInputError("train_fraction must lie strictly between 0 and 1")
    rng = make_rng(seed)
    counts = ds.class_counts()
    present = counts[counts > 0]
    if np.any(present < 2):
        warnings.warn("class with fewer than 2 samples; using an unstratified split", UserWarning)
        order = rng.permutation(len(ds))
        n_train = int(round(len(ds) * train_fraction))
        train_idx, test_idx = order[:n_train], order[n_train:]
    else:
        train_parts, test_parts = [], []
        for k in range(ds.K):
            idx = np.flatnonzero(ds.labels == k)
            if len(idx) == 0:
                continue
            idx = rng.permutation(idx)
            n_train = int(round(len(idx) * train_fraction))
            train_parts.append(idx[:n_train])
            test_parts.append(idx[n_train:])
        train_idx = np.sort(np.concatenate(train_parts))
        test_idx = np.sort(np.concatenate(test_parts))
    return ds.subset(train_idx, f"{ds.name}-train"), ds.subset(test_idx, f"{ds.name}-test")


def split_indices(ds, train_fraction, seed):
    """Index form of ``split`` (used by partition tests)."""
    tagged = replace(ds, X=np.arange(len(ds), dtype=np.float64)[:, None])
    tr, te = split(tagged, train_fraction, seed)
    return tr.X[:, 0].astype(np.int64), te.X[:, 0].astype(np.int64)


def save_csv(ds, path):
    """CSV with header ``label,f0,f1,...``, one row per sample."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{i}" for i in range(ds.input_dim)])
        for label, row in zip(ds.labels, ds.X):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def load_csv(path, K=None, name=None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise FormatError(f"{path}: header must start with 'label'")
        labels, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                labels.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    labels = np.asarray(labels, dtype=np.int64)
    X = np.asarray(rows, dtype=np.float64).reshape(len(labels), len(header) - 1)
    K = K if K is not None else int(labels.max()) + 1
    return Dataset(X, labels, K, name=name or "csv")
