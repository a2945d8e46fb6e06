"""Datasets and their division across devices.

Reads the IDX files MNIST ships in, generates Gaussian-cluster data for
dataset-free runs, and splits a dataset into equal-size device partitions
either uniformly at random or by label shards.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RngSpec

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix plus integer labels.

    ``features`` is either float64 or uint8; uint8 storage is scaled by
    ``1/255`` on access, which keeps MNIST at ~47 MB instead of ~376 MB.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.features.dtype != np.uint8 and not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def rows(self, indices=None) -> np.ndarray:
        x = self.features if indices is None else self.features[indices]
        if x.dtype == np.uint8:
            return x.astype(np.float64) / 255.0
        return x

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices)
        return LabeledDataset(self.features[indices], self.labels[indices], self.n_classes)


@dataclass(frozen=True)
class DevicePartition:
    device_id: int
    sample_indices: np.ndarray
    label_histogram: np.ndarray

    def __len__(self) -> int:
        return self.sample_indices.shape[0]

    @property
    def n_labels(self) -> int:
        return int(np.count_nonzero(self.label_histogram))


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic: int, n_dims: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    header_len = 4 + 4 * n_dims
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(">" + "I" * n_dims, raw[4:header_len])
    n_bytes = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) < n_bytes:
        raise IdxFormatError(f"{path}: truncated payload, {len(body)} of {n_bytes} bytes")
    return np.frombuffer(body, dtype=np.uint8, count=n_bytes).reshape(dims)


def load_idx(images_path, labels_path, *, n_classes: int = 10, storage: str = "float64") -> LabeledDataset:
    """Load an IDX image/label file pair (optionally gzipped).

    Pixels are scaled to ``[0, 1]``. ``storage="uint8"`` keeps raw bytes
    and defers the scaling to :meth:`LabeledDataset.rows`.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1)
    if storage == "uint8":
        feats = flat.copy()
    elif storage == "float64":
        feats = flat.astype(np.float64) / 255.0
    else:
        raise ValueError(f"unknown storage mode {storage!r}")
    return LabeledDataset(feats, labels.astype(np.int64), n_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def find_mnist(data_dir) -> dict[str, tuple[Path, Path]] | None:
    """Locate the four MNIST files (plain or .gz) under ``data_dir``."""
    if data_dir is None:
        return None
    root = Path(data_dir)
    found = {}
    for split, names in MNIST_FILES.items():
        pair = []
        for name in names:
            for candidate in (root / name, root / (name + ".gz"),
                              root / name.replace("-idx", ".idx")):
                if candidate.exists():
                    pair.append(candidate)
                    break
        if len(pair) != 2:
            return None
        found[split] = tuple(pair)
    return found


def load_mnist(data_dir, storage: str = "uint8") -> tuple[LabeledDataset, LabeledDataset]:
    files = find_mnist(data_dir)
    if files is None:
        raise FileNotFoundError(f"MNIST IDX files not found under {os.fspath(data_dir)!r}")
    train = load_idx(*files["train"], storage=storage)
    test = load_idx(*files["test"], storage=storage)
    return train, test


def synth_gaussian_clusters(n_classes: int, n_features: int, n_samples: int, spread: float,
                            rng: RngSpec) -> LabeledDataset:
    """Balanced classes, each an isotropic Gaussian around a random center."""
    if min(n_classes, n_features, n_samples) < 1:
        raise ValueError("n_classes, n_features and n_samples must be positive")
    if spread < 0:
        raise ValueError(f"spread must be >= 0, got {spread}")
    gen = rng.generator()
    centers = gen.standard_normal((n_classes, n_features))
    labels = gen.permutation(np.arange(n_samples) % n_classes)
    noise = gen.standard_normal((n_samples, n_features))
    features = centers[labels] + spread * noise
    return LabeledDataset(features, labels.astype(np.int64), n_classes)


def train_test_split(ds: LabeledDataset, test_fraction: float, rng: RngSpec) -> tuple[LabeledDataset, LabeledDataset]:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    order = rng.generator().permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def _partition(ds: LabeledDataset, device_id: int, indices: np.ndarray) -> DevicePartition:
    indices = np.sort(indices)
    hist = np.bincount(ds.labels[indices], minlength=ds.n_classes)
    return DevicePartition(device_id, indices, hist)


def partition_iid(ds: LabeledDataset, n_devices: int, rng: RngSpec) -> list[DevicePartition]:
    """Random permutation cut into ``n_devices`` equal slices; the remainder is dropped."""
    if n_devices < 1:
        raise ValueError("n_devices must be >= 1")
    if len(ds) < n_devices:
        raise ValueError(f"cannot split {len(ds)} samples across {n_devices} devices")
    size = len(ds) // n_devices
    order = rng.generator().permutation(len(ds))
    return [_partition(ds, k, order[k * size:(k + 1) * size]) for k in range(n_devices)]


def partition_noniid_shards(ds: LabeledDataset, n_devices: int, shards_per_device: int,
                            rng: RngSpec) -> list[DevicePartition]:
    """Label-sorted shards, ``shards_per_device`` of them dealt to each device."""
    if n_devices < 1 or shards_per_device < 1:
        raise ValueError("n_devices and shards_per_device must be >= 1")
    n_shards = n_devices * shards_per_device
    if len(ds) % n_shards:
        raise ValueError(
            f"{len(ds)} samples do not divide into {n_shards} equal shards "
            f"({n_devices} devices x {shards_per_device})")
    shard_size = len(ds) // n_shards
    by_label = np.argsort(ds.labels, kind="stable")
    shard_order = rng.generator().permutation(n_shards)
    parts = []
    for k in range(n_devices):
        mine = shard_order[k * shards_per_device:(k + 1) * shards_per_device]
        idx = np.concatenate([by_label[s * shard_size:(s + 1) * shard_size] for s in mine])
        parts.append(_partition(ds, k, idx))
    return parts


def trim_for_shards(ds: LabeledDataset, n_devices: int, shards_per_device: int) -> LabeledDataset:
    """Drop trailing samples so the shard arithmetic divides evenly."""
    n_shards = n_devices * shards_per_device
    keep = (len(ds) // n_shards) * n_shards
    return ds if keep == len(ds) else ds.subset(np.arange(keep))
