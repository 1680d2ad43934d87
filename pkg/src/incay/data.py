"""MNIST IDX ingestion, mean-image preprocessing, batching and synthetic blobs."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .numerics import Tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """Malformed IDX payload; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    images: Tensor
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, count: int) -> "Dataset":
        """The first ``count`` samples."""
        return replace(self, images=self.images[:count], labels=self.labels[:count])


# --------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX buffer into a uint8 array of its declared shape."""
    if len(raw) < 4:
        raise IdxFormatError("truncated header", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxFormatError(f"truncated payload: need {size} bytes, have {len(raw) - header}", len(raw))
    if len(raw) - header > size:
        raise IdxFormatError(f"{len(raw) - header - size} trailing bytes after payload", header + size)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def to_idx(array: np.ndarray) -> bytes:
    """Serialise a uint8 array as IDX (images for 3-D, labels for 1-D)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"IDX payload must be uint8, got {array.dtype}")
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Load an IDX image/label pair; pixels scaled by 1/255 into [0, 1].

    Files ending in ``.gz`` are decompressed transparently.
    """
    images = parse_idx(_read_bytes(images_path), IMAGE_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    pixels = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(pixels, labels.astype(np.int64), split=split)


def find_mnist(data_dir, split: str) -> tuple[str, str]:
    paths = []
    for name in MNIST_FILES[split]:
        plain = os.path.join(data_dir, name)
        for candidate in (plain, plain + ".gz"):
            if os.path.exists(candidate):
                paths.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{name}[.gz] not found in {data_dir}")
    return paths[0], paths[1]


def load_mnist(data_dir, split: str) -> Dataset:
    images, labels = find_mnist(data_dir, split)
    return load_idx(images, labels, split=split)


# --------------------------------------------------------------------------
# preprocessing and batching


def preprocess(train: Dataset, *others: Dataset, mean: Tensor | None = None):
    """Subtract the training-split mean image from every split.

    Returns ``(mean, train, *others)``. Pass ``mean`` to reuse a stored one.
    """
    if mean is None:
        mean = train.images.mean(axis=0)
    for ds in (train,) + others:
        if ds.images.shape[1:] != mean.shape:
            raise ValueError(f"{ds.split} geometry {ds.images.shape[1:]} != mean image {mean.shape}")
    out = [replace(ds, images=ds.images - mean) for ds in (train,) + others]
    return (mean, *out)


def batches(data: Dataset, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches, reshuffled every epoch.

    Each epoch is a Fisher-Yates permutation drawn from ``rng``; the final
    short batch of an epoch is emitted as is.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(data)
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def synth_gaussian_blobs(k: int, d: int, n_per_class: int, spread: float, rng: np.random.Generator) -> Dataset:
    """Isotropic Gaussian classes centred at 4 * (-1)^j * e_ceil(j/2), j = 1..k.

    Label ``j - 1`` is assigned to the class centred by index ``j``.
    """
    if k > 2 * d:
        raise ValueError(f"need K <= 2D for orthant centres, got K={k}, D={d}")
    if k < 2 or n_per_class < 1 or spread < 0:
        raise ValueError("need K >= 2, n_per_class >= 1, spread >= 0")
    centres = np.zeros((k, d))
    for j in range(1, k + 1):
        centres[j - 1, (j + 1) // 2 - 1] = 4.0 * (-1) ** j
    labels = np.repeat(np.arange(k), n_per_class)
    points = centres[labels] + spread * rng.standard_normal((labels.size, d))
    return Dataset(points, labels, split="train", num_classes=k)
