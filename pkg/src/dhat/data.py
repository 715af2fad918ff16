"""Datasets: IDX and CIFAR binary parsing, synthetic blobs, batching.

Pixels live in [0,1] with no further normalization, so attack budgets
in pixel units apply directly.  Datasets are immutable once built; the
arrays are marked read-only to keep accidental in-place edits from
corrupting shared data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, FormatError

SPLITS = ("train", "val", "test")

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CIFAR_PIXELS = 3072


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ArgumentError(
                f"images must be N x C x H x W, got shape {self.images.shape}")
        n = self.images.shape[0]
        if n == 0:
            raise ArgumentError("dataset must contain at least one sample")
        if self.labels.shape != (n,):
            raise ArgumentError(
                f"{self.labels.shape[0] if self.labels.ndim == 1 else self.labels.shape} "
                f"labels for {n} images")
        if np.any(self.images < 0.0) or np.any(self.images > 1.0):
            raise ArgumentError("pixel values must lie in [0, 1]")
        if self.num_classes < 2:
            raise ArgumentError(f"num_classes must be >= 2, got {self.num_classes}")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise ArgumentError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in SPLITS:
            raise ArgumentError(f"split must be one of {SPLITS}, got {self.split!r}")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, indices, split: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       split or self.split, self.name)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def _read_idx_array(path, expect_magic: int, what: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, f"{what} magic"))
        if magic != expect_magic:
            raise FormatError(
                f"{what} file has magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(f, 4 * ndim, f"{what} dims"))
        payload = _read_exact(f, int(np.prod(dims)), f"{what} payload")
        if f.read(1):
            raise FormatError(f"{what} file has trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None,
             split: str = "train", name: str = "idx") -> Dataset:
    """Parse a big-endian IDX image/label file pair into a Dataset."""
    raw = _read_idx_array(images_path, IDX_IMAGE_MAGIC, "image")
    labels = _read_idx_array(labels_path, IDX_LABEL_MAGIC, "label")
    if raw.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{raw.shape[0]} images but {labels.shape[0]} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 2
        num_classes = max(num_classes, 2)
    if labels.size and int(labels.max()) >= num_classes:
        raise FormatError(
            f"label {int(labels.max())} out of range for {num_classes} classes")
    images = raw.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(images, labels.astype(np.int64), num_classes, split, name)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Quantize a single-channel dataset to bytes and write an IDX pair."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ArgumentError(f"IDX export is single-channel only, got {c} channels")
    pixels = np.clip(np.round(dataset.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar_binary(paths, num_classes: int, split: str = "train",
                      name: str = "cifar") -> Dataset:
    """Parse CIFAR-style binary batches.

    Ten-class records are a label byte plus 3072 pixels; hundred-class
    records carry a coarse label byte first, which is skipped.
    """
    if num_classes not in (10, 100):
        raise ArgumentError(f"num_classes must be 10 or 100, got {num_classes}")
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    record = CIFAR_PIXELS + (2 if num_classes == 100 else 1)
    label_at = 1 if num_classes == 100 else 0
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            blob = f.read()
        if not blob or len(blob) % record:
            raise FormatError(
                f"{path}: length {len(blob)} is not a positive multiple of {record}")
        rows = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
        batch_labels = rows[:, label_at].astype(np.int64)
        if batch_labels.max() >= num_classes:
            raise FormatError(
                f"{path}: label {int(batch_labels.max())} out of range")
        pix = rows[:, record - CIFAR_PIXELS:].reshape(-1, 3, 32, 32)
        images.append(pix.astype(np.float64) / 255.0)
        labels.append(batch_labels)
    return Dataset(np.concatenate(images), np.concatenate(labels),
                   num_classes, split, name)


def save_cifar_binary(dataset: Dataset, path) -> None:
    """Re-encode a 3x32x32 ten-class dataset as CIFAR binary records."""
    n, c, h, w = dataset.images.shape
    if (c, h, w) != (3, 32, 32) or dataset.num_classes != 10:
        raise ArgumentError("CIFAR export needs 3x32x32 images and 10 classes")
    pixels = np.clip(np.round(dataset.images * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        for i in range(n):
            f.write(bytes([int(dataset.labels[i])]))
            f.write(pixels[i].tobytes())


@dataclass
class SynthSpec:
    """Class-conditional Gaussian-blob dataset recipe."""

    num_classes: int = 4
    per_class: int = 100
    image_size: int = 8
    sigma: float = 0.05
    seed: int = 0
    channels: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ArgumentError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.per_class < 1:
            raise ArgumentError(f"per_class must be >= 1, got {self.per_class}")
        if self.image_size < 2:
            raise ArgumentError(f"image_size must be >= 2, got {self.image_size}")
        if self.sigma < 0:
            raise ArgumentError(f"sigma must be >= 0, got {self.sigma}")
        if self.channels < 1:
            raise ArgumentError(f"channels must be >= 1, got {self.channels}")


def class_template(c: int, spec: SynthSpec) -> np.ndarray:
    """The noiseless blob image for class ``c``: a Gaussian bump whose
    center walks a circle as the class index advances."""
    h = spec.image_size
    angle = 2.0 * np.pi * c / spec.num_classes
    radius = h / 4.0
    cy = (h - 1) / 2.0 + radius * np.sin(angle)
    cx = (h - 1) / 2.0 + radius * np.cos(angle)
    yy, xx = np.mgrid[0:h, 0:h]
    width = max(h / 6.0, 1.0)
    bump = 0.9 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
    return np.repeat(bump[None, :, :], spec.channels, axis=0)


def synth_dataset(spec: SynthSpec, split: str = "train") -> Dataset:
    """Deterministic blob dataset: template plus sigma-scaled noise."""
    if split not in SPLITS:
        raise ArgumentError(f"split must be one of {SPLITS}, got {split!r}")
    rng = np.random.default_rng((spec.seed, SPLITS.index(split)))
    n = spec.num_classes * spec.per_class
    shape = (spec.channels, spec.image_size, spec.image_size)
    images = np.empty((n, *shape))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(spec.num_classes):
        template = class_template(c, spec)
        for _ in range(spec.per_class):
            noise = rng.normal(0.0, 1.0, shape) if spec.sigma > 0 else 0.0
            images[i] = np.clip(template + spec.sigma * noise, 0.0, 1.0)
            labels[i] = c
            i += 1
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], spec.num_classes, split,
                   name=f"synth-c{spec.num_classes}s{spec.image_size}")


def split_dataset(ds: Dataset, first: int, split_a: str, split_b: str) -> tuple[Dataset, Dataset]:
    """Cut a dataset at an index into two re-tagged pieces."""
    if not 0 < first < len(ds):
        raise ArgumentError(
            f"split point must lie strictly inside 0..{len(ds)}, got {first}")
    head = Dataset(ds.images[:first], ds.labels[:first], ds.num_classes, split_a, ds.name)
    tail = Dataset(ds.images[first:], ds.labels[first:], ds.num_classes, split_b, ds.name)
    return head, tail


def batch_iter(ds: Dataset, batch_size: int, *, shuffle: bool = False,
               rng: np.random.Generator | None = None):
    """Yield (images, labels, dataset indices) batches.

    The indices identify each sample globally so per-sample attack
    streams stay stable under any batch size.
    """
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(ds))
    if shuffle:
        if rng is None:
            raise ArgumentError("shuffle=True needs an rng")
        order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx], idx


def augment_batch(images: np.ndarray, rng: np.random.Generator,
                  pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus random crop from a zero-padded canvas."""
    n, c, h, w = images.shape
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for i in range(n):
        dy = int(rng.integers(0, 2 * pad + 1))
        dx = int(rng.integers(0, 2 * pad + 1))
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if rng.integers(0, 2) else crop
    return out
