"""Dataset ingestion: IDX files, a bundled 5k MNIST sample, Gaussian blobs."""

from __future__ import annotations

import gzip
import importlib.util
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
IDX_NAMES = {
    "train-images": "train-images-idx3-ubyte",
    "train-labels": "train-labels-idx1-ubyte",
    "test-images": "t10k-images-idx3-ubyte",
    "test-labels": "t10k-labels-idx1-ubyte",
}


class DatasetError(ValueError):
    pass


@dataclass
class DatasetHandle:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    sample_shape: tuple
    num_classes: int
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        for split, y in (("train", self.train_labels), ("test", self.test_labels)):
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise DatasetError(f"{split} labels fall outside [0, {self.num_classes})")

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.train_images, self.train_labels

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.test_images, self.test_labels

    def normalized(self) -> "DatasetHandle":
        """Standardize both splits with the training mean/std (recorded on the handle)."""
        mean, std = float(self.train_images.mean()), float(self.train_images.std()) or 1.0
        return DatasetHandle(
            (self.train_images - mean) / std, self.train_labels,
            (self.test_images - mean) / std, self.test_labels,
            self.sample_shape, self.num_classes, mean, std,
        )


def read_idx(path: Union[str, Path], expect_magic: int) -> np.ndarray:
    """Parse an (optionally gzipped) big-endian IDX file of unsigned bytes."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise DatasetError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expect_magic:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DatasetError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = int(np.prod(dims))
    if len(buf) - header < need:
        raise DatasetError(f"{path}: truncated payload, {len(buf) - header} of {need} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=header).reshape(dims)


def write_idx(path: Union[str, Path], arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{arr.ndim}I", magic, *arr.shape))
        fh.write(arr.tobytes())


def _load_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    return images, labels.astype(np.int64)


def _subset(images, labels, subset: Optional[int], seed: int):
    if subset is None or subset >= len(labels):
        return images, labels
    idx = np.random.default_rng(seed).permutation(len(labels))[:subset]
    return images[idx], labels[idx]


def _to_float(images: np.ndarray) -> np.ndarray:
    return (images.astype(np.float64) / 255.0)[:, None, :, :]


def load_mnist_idx(
    images_path,
    labels_path,
    test_images_path=None,
    test_labels_path=None,
    subset: Optional[int] = None,
    test_subset: Optional[int] = None,
    seed: int = 0,
) -> DatasetHandle:
    """Pixels scaled to ``[0, 1]``, shape ``(N, 1, H, W)``; ``subset`` keeps the first N after a seeded shuffle."""
    tr_x, tr_y = _subset(*_load_pair(images_path, labels_path), subset, seed)
    if test_images_path is not None:
        te_x, te_y = _subset(*_load_pair(test_images_path, test_labels_path), test_subset, seed)
    else:
        te_x, te_y = tr_x[:0], tr_y[:0]
    return DatasetHandle(_to_float(tr_x), tr_y, _to_float(te_x), te_y, (1,) + tr_x.shape[1:], 10)


def load_mnist_dir(data_dir, subset=None, test_subset=None, seed: int = 0) -> DatasetHandle:
    d = Path(data_dir)
    paths = {k: d / v for k, v in IDX_NAMES.items()}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise DatasetError(f"missing IDX files: {', '.join(missing)}")
    return load_mnist_idx(
        paths["train-images"], paths["train-labels"], paths["test-images"], paths["test-labels"],
        subset, test_subset, seed,
    )


def make_synthetic(
    classes: int = 2,
    dim: int = 64,
    n: int = 100,
    seed: int = 0,
    n_test: Optional[int] = None,
    separation: float = 8.0,
) -> DatasetHandle:
    """Unit-variance Gaussian blobs whose means are pairwise ``separation`` (>= 4) apart.

    Labels are assigned round-robin. When ``dim`` is a perfect square the
    samples are shaped as one-channel images.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if dim < classes:
        raise ValueError(f"dim={dim} cannot hold {classes} orthogonal class means")
    if separation < 4.0:
        raise ValueError("class means must be at least 4 sigma apart")
    rng = np.random.default_rng(seed)
    means = np.eye(classes, dim) * (separation / np.sqrt(2.0))
    side = int(round(np.sqrt(dim)))
    shape = (1, side, side) if side * side == dim else (dim,)

    def draw(count):
        y = np.arange(count) % classes
        x = means[y] + rng.standard_normal((count, dim))
        return x.reshape((count,) + shape), y

    tr_x, tr_y = draw(n)
    te_x, te_y = draw(n // 4 if n_test is None else n_test)
    return DatasetHandle(tr_x, tr_y, te_x, te_y, shape, classes)


def bundled_mnist_csv() -> Path:
    """Path of the 5000-sample MNIST CSV shipped inside the ``mlxtend`` wheel (located, not imported)."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        raise DatasetError("the mlxtend package is not installed; `pip install mlxtend` or pass --source")
    path = Path(os.path.dirname(spec.origin)) / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        raise DatasetError(f"{path} not found in the installed mlxtend package")
    return path


def prepare_mnist(out_dir, source=None, n_test: int = 1000, seed: int = 0) -> dict:
    """Write a stratified train/test split of the 5k CSV sample as standard IDX files.

    CSV rows are 784 pixel values followed by the label.
    """
    source = Path(source) if source else bundled_mnist_csv()
    opener = gzip.open if source.suffix == ".gz" else open
    with opener(source, "rt") as fh:
        rows = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    if rows.ndim != 2 or rows.shape[1] != 785:
        raise DatasetError(f"{source}: expected 785 columns (784 pixels + label), got shape {rows.shape}")
    images = rows[:, :784].reshape(-1, 28, 28).astype(np.uint8)
    labels = rows[:, 784].astype(np.uint8)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    per_class = n_test // len(classes)
    test_idx = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        test_idx.extend(rng.permutation(members)[:per_class])
    test_idx = np.sort(np.array(test_idx))
    train_idx = np.setdiff1d(np.arange(len(labels)), test_idx)
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / IDX_NAMES["train-images"], images[train_idx])
    write_idx(out / IDX_NAMES["train-labels"], labels[train_idx])
    write_idx(out / IDX_NAMES["test-images"], images[test_idx])
    write_idx(out / IDX_NAMES["test-labels"], labels[test_idx])
    return {"source": str(source), "train": int(len(train_idx)), "test": int(len(test_idx)), "dir": str(out)}
