"""Dataset ingestion: IDX files, synthetic blobs and the bundled MNIST sample."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass
class LabeledImages:
    """Images of shape (N, C, H, W) scaled to [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("image values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledImages":
        return LabeledImages(self.images[index], self.labels[index], self.num_classes)


# ------------------------------------------------------------------ IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated header at offset 0 (have {len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise DatasetError(f"{path}: unsupported IDX type 0x{magic:08x} at offset 0")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    if any(d == 0 for d in dims) and ndim:
        raise DatasetError(f"{path}: zero-sized dimension {dims} at offset 4")
    count = int(np.prod(dims)) if ndim else 0
    payload = raw[header_end:]
    if len(payload) != count:
        raise DatasetError(
            f"{path}: payload at offset {header_end} has {len(payload)} bytes, expected {count}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DatasetError(f"IDX writer expects uint8, got {array.dtype}")
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    data = header + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


def load_idx_pair(images_path, labels_path, num_classes: int = 10) -> LabeledImages:
    imgs = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if imgs.shape[0] != labels.shape[0]:
        raise DatasetError(
            f"label file {labels_path} has {labels.shape[0]} entries but {images_path} has {imgs.shape[0]} images"
        )
    if labels.max(initial=0) >= num_classes:
        raise DatasetError(f"{labels_path}: label {labels.max()} >= class count {num_classes}")
    images = imgs.astype(np.float64)[:, None] / 255.0
    return LabeledImages(images, labels.astype(np.int64), num_classes)


def save_idx_pair(data: LabeledImages, images_path, labels_path) -> None:
    if data.images.shape[1] != 1:
        raise DatasetError("IDX export supports single-channel images only")
    pixels = np.rint(data.images[:, 0] * 255.0).astype(np.uint8)
    write_idx(images_path, pixels)
    write_idx(labels_path, data.labels.astype(np.uint8))


# ------------------------------------------------------------------ synthetic


def synthetic_blobs(
    classes: int = 2,
    n: int = 500,
    seed: int = 0,
    shape: tuple[int, int, int] = (1, 8, 8),
    noise: float = 0.1,
) -> LabeledImages:
    """Gaussian blobs around one random prototype image per class, clipped to [0, 1]."""
    if classes < 2 or n < 1:
        raise DatasetError(f"synthetic blobs need classes >= 2 and n >= 1, got {classes}, {n}")
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0.2, 0.8, size=(classes, *shape))
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    images = np.clip(protos[labels] + noise * rng.standard_normal((n, *shape)), 0.0, 1.0)
    return LabeledImages(images, labels, classes)


# ------------------------------------------------------------------ MNIST sample


def mnist_sample(n_train: int = 3500, split_seed: int = 0) -> tuple[LabeledImages, LabeledImages]:
    """The 5000-image MNIST subset shipped with mlxtend, shuffled and split.

    Pixels are the original 8-bit values divided by 255.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    order = np.random.default_rng(split_seed).permutation(len(y))
    x = x[order].reshape(-1, 1, 28, 28) / 255.0
    y = y[order].astype(np.int64)
    if not 0 < n_train < len(y):
        raise DatasetError(f"n_train must be in (0, {len(y)}), got {n_train}")
    return (
        LabeledImages(x[:n_train], y[:n_train], 10),
        LabeledImages(x[n_train:], y[n_train:], 10),
    )


def export_mnist_sample(out_dir, n_train: int = 3500) -> dict[str, Path]:
    """Write the bundled sample as four gzipped IDX files and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = mnist_sample(n_train)
    paths = {
        "train_images": out_dir / "train-images-idx3-ubyte.gz",
        "train_labels": out_dir / "train-labels-idx1-ubyte.gz",
        "test_images": out_dir / "t10k-images-idx3-ubyte.gz",
        "test_labels": out_dir / "t10k-labels-idx1-ubyte.gz",
    }
    save_idx_pair(train, paths["train_images"], paths["train_labels"])
    save_idx_pair(test, paths["test_images"], paths["test_labels"])
    return paths
