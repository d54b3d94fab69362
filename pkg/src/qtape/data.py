"""Dataset ingestion, synthetic data, and augmentation.

The CIFAR-10 loader reads the binary distribution: each record is 3073
bytes, one label byte followed by 3072 pixel bytes in channel-major
R,G,B order, row-major within each channel.  Pixels are scaled to [0,1]
and standardized per channel with constants from the training split.
write_cifar10_file dumps tensors back into the same record layout, which
is how tests and synthetic workloads exercise the real parser.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, FormatError

RECORD_BYTES = 3073
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: np.ndarray            # (N,C,H,W) or (N,D) float32
    labels: np.ndarray            # (N,) int64
    num_classes: int
    norm_mean: Optional[np.ndarray] = None
    norm_std: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images/labels length mismatch")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise DataError("label outside class range")

    def __len__(self) -> int:
        return len(self.labels)


def _parse_records(path: str):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise FormatError(
            f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}")
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(dir_path: str, split: str = "train",
                 norm_stats: Optional[tuple] = None) -> Dataset:
    """Load the binary CIFAR-10 batches under dir_path.

    norm_stats is (mean, std) per channel from a previous train-split
    load; pass it when loading the test split so both splits share the
    training constants.
    """
    files = TRAIN_FILES if split == "train" else [TEST_FILE]
    paths = [os.path.join(dir_path, f) for f in files]
    # tolerate a partial training set (fewer batch files) for small runs
    present = [p for p in paths if os.path.exists(p)]
    if not present:
        raise FileNotFoundError(f"no {split} batch files under {dir_path}")
    parts = [_parse_records(p) for p in present]
    images_u8 = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if labels.max() > 9:
        raise DataError("CIFAR-10 label byte exceeds 9")
    images = images_u8.astype(np.float32) / np.float32(255.0)
    if norm_stats is None:
        if split != "train":
            raise DataError(
                "test split needs norm_stats computed from the train split")
        mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
        std = np.maximum(images.std(axis=(0, 2, 3), dtype=np.float64), 1e-8)
    else:
        mean, std = norm_stats
    images -= mean.reshape(1, -1, 1, 1).astype(np.float32)
    images /= std.reshape(1, -1, 1, 1).astype(np.float32)
    return Dataset(images=images, labels=labels, num_classes=10,
                   norm_mean=np.asarray(mean), norm_std=np.asarray(std))


def write_cifar10_file(path: str, images_u8: np.ndarray,
                       labels: np.ndarray) -> None:
    """Write (N,3,32,32) uint8 images + labels in the binary record layout."""
    n = len(labels)
    if images_u8.shape != (n, 3, 32, 32) or images_u8.dtype != np.uint8:
        raise DataError("expected (N,3,32,32) uint8 images")
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images_u8.reshape(n, -1)
    rec.tofile(path)


def synth_blobs(seed: int, n: int, classes: int, shape,
                separation: float = 3.0) -> Dataset:
    """Gaussian clusters with controllable separation; balanced classes."""
    if n < classes:
        raise DataError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    if isinstance(shape, int):
        shape = (shape,)
    dim = int(np.prod(shape))
    centers = rng.standard_normal((classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    x = centers[labels] + rng.standard_normal((n, dim))
    images = x.reshape((n,) + tuple(shape)).astype(np.float32)
    return Dataset(images=images, labels=labels.astype(np.int64),
                   num_classes=classes)


def synth_cifar_like(seed: int, n: int, classes: int = 10,
                     noise: float = 32.0, style: str = "smooth"):
    """Class-structured 32x32 RGB images in uint8, CIFAR record-compatible.

    style="smooth": each class is a low-frequency random pattern
    upsampled to 32x32.  style="sparse": a handful of bright 4x4 blocks
    on a dark background, which yields heavy-tailed post-normalization
    activations like natural images do.  Samples add a random spatial
    shift and pixel noise, giving a signal a small convnet can learn
    while batches keep nontrivial gradient variance.
    """
    rng = np.random.default_rng(seed)
    if style == "smooth":
        base = rng.uniform(40, 215, size=(classes, 3, 8, 8))
    elif style == "sparse":
        base = np.full((classes, 3, 8, 8), 25.0)
        for k in range(classes):
            for _ in range(5):
                c = rng.integers(0, 3)
                y, x = rng.integers(0, 8), rng.integers(0, 8)
                base[k, c, y, x] = 235.0
    elif style == "natural":
        # smooth backgrounds plus a few bright highlights: bulk energy
        # with mild tails, akin to photographic statistics
        base = rng.uniform(40, 160, size=(classes, 3, 8, 8))
        for k in range(classes):
            for _ in range(4):
                c = rng.integers(0, 3)
                y, x = rng.integers(0, 8), rng.integers(0, 8)
                base[k, c, y, x] += 140.0
    else:
        raise DataError(f"unknown style {style!r}")
    templates = np.kron(base, np.ones((1, 1, 4, 4)))        # (K,3,32,32)
    labels = (np.arange(n) % classes).astype(np.int64)
    rng.shuffle(labels)
    shifts = rng.integers(-3, 4, size=(n, 2))
    imgs = np.empty((n, 3, 32, 32), dtype=np.float64)
    for i in range(n):
        t = templates[labels[i]]
        t = np.roll(t, (shifts[i, 0], shifts[i, 1]), axis=(1, 2))
        imgs[i] = t
    imgs += rng.standard_normal(imgs.shape) * noise
    images_u8 = np.clip(imgs, 0, 255).astype(np.uint8)
    return images_u8, labels


def make_synthetic_cifar_dir(dir_path: str, seed: int = 0,
                             train_n: int = 5000, test_n: int = 1000,
                             noise: float = 32.0,
                             style: str = "smooth") -> str:
    """Generate a synthetic corpus in the CIFAR-10 binary layout."""
    os.makedirs(dir_path, exist_ok=True)
    images, labels = synth_cifar_like(seed, train_n + test_n, noise=noise,
                                      style=style)
    write_cifar10_file(os.path.join(dir_path, TRAIN_FILES[0]),
                       images[:train_n], labels[:train_n])
    write_cifar10_file(os.path.join(dir_path, TEST_FILE),
                       images[train_n:], labels[train_n:])
    return dir_path


def augment_batch(batch: np.ndarray, rng: np.random.Generator,
                  hflip: bool = True, translate: bool = True) -> np.ndarray:
    """Per-image horizontal flip (p=0.5) and pad-4 random-crop translation.

    Deterministic given the generator state; returns a new array.
    """
    if batch.ndim != 4:
        raise DataError("augmentation expects a rank-4 batch")
    out = batch.copy()
    n, c, h, w = batch.shape
    if hflip:
        flips = rng.random(n) < 0.5
        out[flips] = out[flips, :, :, ::-1]
    if translate:
        pad = 4
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
        padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=batch.dtype)
        for i in range(n):
            dy, dx = offsets[i]
            if dy == pad and dx == pad:
                continue
            padded[...] = 0
            padded[:, pad:pad + h, pad:pad + w] = out[i]
            out[i] = padded[:, dy:dy + h, dx:dx + w]
    return out
