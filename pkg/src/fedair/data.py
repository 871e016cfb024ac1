"""MNIST ingestion: IDX parsing, 4-class reduction and two-client partitioning."""
from __future__ import annotations

import enum
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_CLASSES = 4
N_PIXELS = 784


class IngestionError(ValueError):
    """Raised for malformed or inconsistent IDX input."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte offset {offset}: {message}")
        self.path = path
        self.offset = offset


class PartitionError(ValueError):
    pass


class PartitionMode(enum.Enum):
    IID = "iid"
    NON_IID = "noniid"

    @classmethod
    def parse(cls, value: "str | PartitionMode") -> "PartitionMode":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        for mode in cls:
            if mode.value == key:
                return mode
        raise ValueError(f"unknown partition mode {value!r} (expected iid or noniid)")


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        if self.pixels.shape != (N_PIXELS,):
            raise ValueError(f"expected {N_PIXELS} pixels, got shape {self.pixels.shape}")
        if not np.all((self.pixels >= 0.0) & (self.pixels <= 1.0)):
            raise ValueError("pixel values must lie in [0, 1]")
        if not 0 <= self.label < N_CLASSES:
            raise ValueError(f"label {self.label} outside 0..{N_CLASSES - 1}")


@dataclass
class ClientDataset:
    client_id: int
    samples: list[LabeledImage]
    label_histogram: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.samples:
            raise PartitionError(f"client {self.client_id} received no samples")
        self.label_histogram = np.bincount(
            [s.label for s in self.samples], minlength=N_CLASSES
        )

    def __len__(self):
        return len(self.samples)

    @property
    def classes(self) -> set[int]:
        return {int(c) for c in np.flatnonzero(self.label_histogram)}


def as_arrays(samples: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into an ``(n, 784)`` float64 matrix and an int label vector."""
    if not samples:
        return np.empty((0, N_PIXELS)), np.empty(0, dtype=np.int64)
    x = np.stack([s.pixels for s in samples]).astype(np.float64, copy=False)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except (OSError, EOFError) as exc:
        raise IngestionError(path, 0, f"cannot read file ({exc})") from exc


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse one IDX file (optionally gzipped) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IngestionError(path, len(raw), "truncated header")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IngestionError(path, 0, f"bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IngestionError(path, len(raw), f"truncated header (need {header_len} bytes)")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    n_bytes = int(np.prod(dims))
    if len(raw) - header_len < n_bytes:
        raise IngestionError(
            path, len(raw), f"truncated data: dims {dims} need {n_bytes} bytes after header"
        )
    if len(raw) - header_len > n_bytes:
        raise IngestionError(path, header_len + n_bytes, "trailing bytes after declared data")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len, count=n_bytes).reshape(dims)


def _filter(images_path, labels_path, selected, max_per_class, seed):
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise IngestionError(images_path, 4, f"expected 28x28 images, got dims {images.shape}")
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            labels_path, 4, f"label count {labels.shape[0]} != image count {images.shape[0]}"
        )
    remap = {orig: new for new, orig in enumerate(sorted(selected))}
    keep = np.flatnonzero(np.isin(labels, list(remap)))
    if max_per_class is not None:
        rng = np.random.default_rng(seed)
        capped = []
        for orig in sorted(remap):
            idx = keep[labels[keep] == orig]
            if len(idx) > max_per_class:
                idx = np.sort(rng.choice(idx, size=max_per_class, replace=False))
            capped.append(idx)
        keep = np.sort(np.concatenate(capped))
    flat = images.reshape(images.shape[0], N_PIXELS)
    return [
        LabeledImage(flat[i].astype(np.float64) / 255.0, remap[int(labels[i])]) for i in keep
    ]


def load_mnist(
    train_images_path,
    train_labels_path,
    test_images_path,
    test_labels_path,
    selected_classes=(0, 1, 2, 3),
    seed: int = 0,
    max_per_class: int | None = None,
) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Load MNIST restricted to four digits, remapped to labels 0..3 in ascending order.

    ``max_per_class`` caps the *training* split only (seeded); the test split is
    always kept whole.
    """
    selected = tuple(int(c) for c in selected_classes)
    if len(selected) != N_CLASSES or len(set(selected)) != N_CLASSES:
        raise ValueError(f"need {N_CLASSES} distinct classes, got {selected_classes!r}")
    if not all(0 <= c <= 9 for c in selected):
        raise ValueError(f"classes must lie in 0..9, got {selected_classes!r}")
    train = _filter(train_images_path, train_labels_path, selected, max_per_class, seed)
    test = _filter(test_images_path, test_labels_path, selected, None, seed)
    return train, test


def load_mnist_dir(data_dir, selected_classes=(0, 1, 2, 3), seed=0, max_per_class=None):
    """``load_mnist`` over the four standard file names in ``data_dir`` (``.gz`` optional)."""
    data_dir = Path(data_dir)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (data_dir / name).exists():
                return data_dir / name
        raise IngestionError(data_dir / stem, 0, "file not found")

    return load_mnist(
        find("train-images-idx3-ubyte"),
        find("train-labels-idx1-ubyte"),
        find("t10k-images-idx3-ubyte"),
        find("t10k-labels-idx1-ubyte"),
        selected_classes,
        seed,
        max_per_class,
    )


def partition(
    train: list[LabeledImage], mode: PartitionMode | str, seed: int = 0
) -> tuple[ClientDataset, ClientDataset]:
    mode = PartitionMode.parse(mode)
    if not train:
        raise PartitionError("cannot partition an empty training set")
    if mode is PartitionMode.IID:
        order = np.random.default_rng(seed).permutation(len(train))
        half = (len(train) + 1) // 2
        return (
            ClientDataset(1, [train[i] for i in order[:half]]),
            ClientDataset(2, [train[i] for i in order[half:]]),
        )
    present = {s.label for s in train}
    missing = sorted(set(range(N_CLASSES)) - present)
    if missing:
        raise PartitionError(f"non-IID partition needs every class; missing {missing}")
    return (
        ClientDataset(1, [s for s in train if s.label in (0, 1)]),
        ClientDataset(2, [s for s in train if s.label in (2, 3)]),
    )
