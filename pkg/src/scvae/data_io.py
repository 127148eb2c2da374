"""MNIST IDX ingestion, the fixed 50k/10k/10k split, and a synthetic stand-in."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, InputError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Subset:
    images: np.ndarray  # [n, d] float64 in [0, 1]
    labels: np.ndarray  # [n] uint8

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class DatasetSplit:
    train: Subset
    val: Subset
    test: Subset

    @property
    def input_dim(self) -> int:
        return self.train.images.shape[1]


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX image or label file.

    Images come back as float64 rows scaled to [0, 1], one row per item;
    labels as a uint8 vector. Gzip input is decompressed transparently.
    """
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    if len(raw) < 8:
        raise FormatError(f"IDX header needs at least 8 bytes, got {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise FormatError(
            f"unexpected IDX magic 0x{magic:08X}; expected 0x{IMAGE_MAGIC:08X} or 0x{LABEL_MAGIC:08X}"
        )
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"IDX header truncated: expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    actual = len(raw) - header
    if actual != expected:
        raise FormatError(f"IDX payload size mismatch: expected {expected} bytes, got {actual}")
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if ndim == 1:
        return payload.copy()
    return payload.reshape(dims[0], dims[1] * dims[2]).astype(np.float64) / 255.0


def write_idx(data: np.ndarray, rows: int | None = None, cols: int | None = None) -> bytes:
    """Encode labels (1-D uint8) or images (2-D, values in [0, 1]) as IDX bytes."""
    data = np.asarray(data)
    if data.ndim == 1:
        if data.size and (data.min() < 0 or data.max() > 255):
            raise InputError("labels must fit in an unsigned byte")
        return struct.pack(">II", LABEL_MAGIC, data.shape[0]) + data.astype(np.uint8).tobytes()
    if data.ndim != 2:
        raise ConfigurationError(f"write_idx expects 1-D labels or 2-D images, got {data.ndim}-D")
    n, d = data.shape
    if rows is None or cols is None:
        side = int(round(np.sqrt(d)))
        rows, cols = (side, side) if side * side == d else (1, d)
    if rows * cols != d:
        raise ConfigurationError(f"{rows}x{cols} does not match row length {d}")
    if d and (data.min() < 0.0 or data.max() > 1.0):
        raise InputError("image values must lie in [0, 1]")
    pixels = np.rint(data * 255.0).astype(np.uint8)
    return struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pixels.tobytes()


def load_idx(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
    return parse_idx(path.read_bytes())


def make_splits(
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    seed: int | None = None,
) -> DatasetSplit:
    """First 50,000 training rows train, last 10,000 validate, official test set tests.

    ``seed`` is accepted for interface symmetry; the split never depends on it.
    """
    del seed
    if train_images.shape[0] != 60000 or train_labels.shape[0] != 60000:
        raise InputError(
            f"expected 60000 training rows, got {train_images.shape[0]} images / {train_labels.shape[0]} labels"
        )
    if test_images.shape[0] != 10000 or test_labels.shape[0] != 10000:
        raise InputError(
            f"expected 10000 test rows, got {test_images.shape[0]} images / {test_labels.shape[0]} labels"
        )
    return DatasetSplit(
        train=Subset(train_images[:50000], train_labels[:50000]),
        val=Subset(train_images[50000:], train_labels[50000:]),
        test=Subset(test_images, test_labels),
    )


def load_mnist(directory: str | Path) -> DatasetSplit:
    directory = Path(directory)
    arrays = {key: load_idx(directory / name) for key, name in MNIST_FILES.items()}
    return make_splits(**arrays)


def synth_dataset(
    seed: int,
    n_per_class: int = 250,
    n_classes: int = 4,
    d: int = 64,
    n_val_per_class: int | None = None,
    n_test_per_class: int | None = None,
) -> DatasetSplit:
    """Class-conditional product-Bernoulli images around random templates.

    Each class gets a template in [0.1, 0.9]^d; every pixel is an independent
    Bernoulli draw from its class template, so pixel values are 0 or 1.
    """
    if not 1 <= n_classes <= 10:
        raise ConfigurationError(f"n_classes must be in 1..10, got {n_classes}")
    if d < 2:
        raise ConfigurationError(f"d must be at least 2, got {d}")
    if n_per_class < 1:
        raise ConfigurationError(f"n_per_class must be positive, got {n_per_class}")
    n_val = n_per_class // 2 if n_val_per_class is None else n_val_per_class
    n_test = n_per_class // 2 if n_test_per_class is None else n_test_per_class
    rng = np.random.default_rng(seed)
    templates = rng.uniform(0.1, 0.9, size=(n_classes, d))

    def draw(per_class: int) -> Subset:
        labels = np.repeat(np.arange(n_classes, dtype=np.uint8), per_class)
        order = rng.permutation(labels.size)
        labels = labels[order]
        images = (rng.random((labels.size, d)) < templates[labels]).astype(np.float64)
        return Subset(images, labels)

    return DatasetSplit(train=draw(n_per_class), val=draw(n_val), test=draw(n_test))


def write_split(split: DatasetSplit, directory: str | Path) -> list[Path]:
    """Store a split as six IDX files (train/val/test images and labels)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("train", "val", "test"):
        subset = getattr(split, name)
        for kind, payload in (("images", write_idx(subset.images)), ("labels", write_idx(subset.labels))):
            path = directory / f"{name}-{kind}.idx"
            path.write_bytes(payload)
            written.append(path)
    return written


def read_split(directory: str | Path) -> DatasetSplit:
    directory = Path(directory)
    parts = {}
    for name in ("train", "val", "test"):
        parts[name] = Subset(
            load_idx(directory / f"{name}-images.idx"), load_idx(directory / f"{name}-labels.idx")
        )
    return DatasetSplit(**parts)
