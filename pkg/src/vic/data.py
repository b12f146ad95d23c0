"""Readers for IDX (MNIST family) and CIFAR binary files, plus batching."""

from __future__ import annotations

import gzip
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
GZIP_MAGIC = b"\x1f\x8b"


class DataFormatError(ValueError):
    pass


class DatasetNotFound(FileNotFoundError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError("IDX header truncated")
    magic = int.from_bytes(raw[:4], "big")
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError("IDX header truncated")
    dims = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    need = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < need:
        raise DataFormatError(f"IDX payload truncated: header declares {dims} ({need} bytes), found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims).copy()


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) as a uint8 array."""
    return parse_idx(_read_bytes(path))


def serialize_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise DataFormatError("IDX serialisation supports uint8 label vectors and 3-D image stacks")
    magic = IDX_IMAGES if array.ndim == 3 else IDX_LABELS
    head = magic.to_bytes(4, "big") + b"".join(int(n).to_bytes(4, "big") for n in array.shape)
    return head + np.ascontiguousarray(array).tobytes()


def write_idx(path, array: np.ndarray, compress: bool = False) -> None:
    raw = serialize_idx(array)
    Path(path).write_bytes(gzip.compress(raw, mtime=0) if compress else raw)


@dataclass
class DatasetBundle:
    train_images: np.ndarray  # N x C x H x W float32 in [0, 1]
    train_labels: np.ndarray  # N int64
    test_images: np.ndarray
    test_labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        k = self.meta.get("num_classes")
        for labels in (self.train_labels, self.test_labels):
            if k is not None and labels.size and (labels.min() < 0 or labels.max() >= k):
                raise DataFormatError(f"labels outside [0, {k})")

    @property
    def num_classes(self) -> int:
        return self.meta["num_classes"]

    def subset(self, train: int | None = None, test: int | None = None) -> "DatasetBundle":
        return DatasetBundle(
            self.train_images[:train], self.train_labels[:train],
            self.test_images[:test], self.test_labels[:test], dict(self.meta),
        )


def normalize(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / np.float32(255.0)


def _idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DataFormatError(f"{images_path} / {labels_path}: image and label counts disagree")
    return normalize(images)[:, None, :, :], labels.astype(np.int64)


def emnist_transpose(images: np.ndarray) -> np.ndarray:
    """EMNIST IDX images are stored column-major; flip them to upright orientation."""
    return np.ascontiguousarray(images.transpose(0, 1, 3, 2))


# name -> (subdirectory, file prefix per split, number of classes)
IDX_DATASETS = {
    "mnist": ("mnist", {"train": "train", "test": "t10k"}, 10),
    "kmnist": ("kmnist", {"train": "train", "test": "t10k"}, 10),
    "emnist-balanced": ("emnist", {"train": "emnist-balanced-train", "test": "emnist-balanced-test"}, 47),
    "mnist-sample": ("mnist-sample", {"train": "train", "test": "t10k"}, 10),
}
CIFAR_DATASETS = {
    "cifar10": ("cifar-10-batches-bin", [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"], 10),
    "cifar100": ("cifar-100-binary", ["train.bin"], ["test.bin"], 100),
}
DATASETS = sorted(IDX_DATASETS) + sorted(CIFAR_DATASETS)


def data_dir(root=None) -> Path:
    return Path(root if root is not None else os.environ.get("DATA_DIR", "data"))


def _find(directory: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    return None


def idx_files(name: str, root=None) -> dict[str, Path]:
    sub, prefixes, _ = IDX_DATASETS[name]
    directory = data_dir(root) / sub
    expected, found = [], {}
    for split, prefix in prefixes.items():
        for kind, stem in (("images", f"{prefix}-images-idx3-ubyte"), ("labels", f"{prefix}-labels-idx1-ubyte")):
            path = _find(directory, stem)
            expected.append(str(directory / stem) + "[.gz]")
            if path is not None:
                found[f"{split}_{kind}"] = path
    if len(found) != 4:
        raise DatasetNotFound(f"dataset {name!r} not found; expected files: {', '.join(expected)}")
    return found


def dataset_files(name: str, root=None) -> list[Path]:
    if name in IDX_DATASETS:
        return list(idx_files(name, root).values())
    if name in CIFAR_DATASETS:
        sub, train, test, _ = CIFAR_DATASETS[name]
        directory = data_dir(root) / sub
        paths = [directory / f for f in train + test]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise DatasetNotFound(f"dataset {name!r} not found; missing files: {', '.join(missing)}")
        return paths
    raise DatasetNotFound(f"unknown dataset {name!r}; known: {DATASETS}")


def dataset_checksum(name: str, root=None) -> str:
    h = hashlib.sha256()
    for path in sorted(dataset_files(name, root)):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def load_dataset(name: str, root=None) -> DatasetBundle:
    """Load a dataset by name from ``root`` (default: ``$DATA_DIR``)."""
    if name in CIFAR_DATASETS:
        sub, train, test, k = CIFAR_DATASETS[name]
        directory = data_dir(root) / sub
        dataset_files(name, root)
        tr = read_cifar_binary([directory / f for f in train], k)
        te = read_cifar_binary([directory / f for f in test], k)
        return DatasetBundle(tr[0], tr[1], te[0], te[1], _meta(name, k, tr[0]))
    if name not in IDX_DATASETS:
        raise DatasetNotFound(f"unknown dataset {name!r}; known: {DATASETS}")
    files = idx_files(name, root)
    k = IDX_DATASETS[name][2]
    xtr, ytr = _idx_pair(files["train_images"], files["train_labels"])
    xte, yte = _idx_pair(files["test_images"], files["test_labels"])
    if name.startswith("emnist"):
        xtr, xte = emnist_transpose(xtr), emnist_transpose(xte)
    return DatasetBundle(xtr, ytr, xte, yte, _meta(name, k, xtr))


def _meta(name, k, images) -> dict:
    return {"name": name, "num_classes": k, "channels": images.shape[1],
            "height": images.shape[2], "width": images.shape[3]}


def read_cifar_binary(paths: Sequence, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Read CIFAR-10/100 binary batches.

    Each record is the label byte(s) followed by 3072 pixel bytes stored
    channel-planar (all 1024 red values, then green, then blue), not
    interleaved RGB. CIFAR-100 records carry a coarse and a fine label; the
    fine label is returned.
    """
    label_bytes = 1 if num_classes == 10 else 2
    record = label_bytes + 3072
    images, labels = [], []
    for path in paths:
        raw = np.frombuffer(_read_bytes(path), dtype=np.uint8)
        if raw.size % record:
            raise DataFormatError(f"{path}: length {raw.size} is not a multiple of the {record}-byte record")
        recs = raw.reshape(-1, record)
        labels.append(recs[:, label_bytes - 1].astype(np.int64))
        images.append(recs[:, label_bytes:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(labels)
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(f"label {labels.max()} outside [0, {num_classes})")
    return normalize(np.concatenate(images)), labels


class BatchIterator:
    """Shuffled mini-batches whose order depends only on ``(seed, epoch)``."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, batch_size: int, seed: int = 0, shuffle: bool = True):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.images = images
        self.labels = labels
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0

    def __len__(self) -> int:
        return -(-len(self.labels) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        n = len(self.labels)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def batches(self, epoch: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield one epoch of batches; the final partial batch is kept."""
        epoch = self.epoch if epoch is None else epoch
        idx = self.order(epoch)
        self.epoch = epoch + 1
        for start in range(0, len(idx), self.batch_size):
            sel = idx[start:start + self.batch_size]
            yield self.images[sel], self.labels[sel]

    def __iter__(self):
        return self.batches()
