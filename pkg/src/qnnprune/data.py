"""Dataset container, the QDS1 on-disk format, and a bundled synthetic set.

A dataset directory holds ``images.bin`` (magic ``QDS1``, then N, C, H, W as
little-endian u32, then raw u8 pixels in N x C x H x W order) and
``labels.bin`` (one little-endian u32 per sample).  The loader maps u8 to
[0, 1] and standardizes with per-channel constants.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qnnprune.errors import FormatError

MAGIC = b"QDS1"

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


@dataclass
class Dataset:
    x: np.ndarray       # float32, N x C x H x W, standardized
    y: np.ndarray       # int64 labels

    def __len__(self):
        return len(self.x)

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def save_qds1(directory, images: np.ndarray, labels: np.ndarray):
    """Write a u8 image tensor and labels in the QDS1 layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 4:
        raise FormatError("images must be N x C x H x W")
    n, c, h, w = images.shape
    with open(directory / "images.bin", "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<4I", n, c, h, w))
        f.write(images.tobytes())
    np.asarray(labels, dtype="<u4").tofile(directory / "labels.bin")


def load_qds1(directory, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> Dataset:
    """Load a QDS1 directory, normalize to [0,1], standardize per channel."""
    directory = Path(directory)
    path = directory / "images.bin"
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        n, c, h, w = struct.unpack("<4I", f.read(16))
        raw = np.frombuffer(f.read(), dtype=np.uint8)
    if raw.size != n * c * h * w:
        raise FormatError(f"{path}: payload size mismatch")
    labels = np.fromfile(directory / "labels.bin", dtype="<u4").astype(np.int64)
    if labels.size != n:
        raise FormatError(f"{directory}: label count {labels.size} != {n}")
    x = raw.reshape(n, c, h, w).astype(np.float32) / 255.0
    mean = np.asarray(mean, dtype=np.float32)[:c].reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32)[:c].reshape(1, -1, 1, 1)
    return Dataset((x - mean) / std, labels)


def make_synthetic_images(n: int, seed: int, classes: int = 10,
                          size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Textured-pattern classification set, 3-channel, u8.

    Each class is an oriented sinusoidal grating with a class-specific
    frequency and color tint; samples vary in phase, amplitude and additive
    noise.  Deliberately learnable at desk scale but not trivially so.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    tints = np.array([
        [1.0, 0.3, 0.3], [0.3, 1.0, 0.3], [0.3, 0.3, 1.0], [1.0, 1.0, 0.3],
        [1.0, 0.3, 1.0], [0.3, 1.0, 1.0], [1.0, 0.7, 0.4], [0.4, 0.7, 1.0],
        [0.8, 0.8, 0.8], [0.6, 1.0, 0.6],
    ])
    labels = rng.integers(0, classes, size=n)
    images = np.empty((n, 3, size, size), dtype=np.uint8)
    for i, c in enumerate(labels):
        angle = np.pi * c / classes
        freq = 2.0 + 0.5 * c
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.30, 0.45)
        grid = xx * np.cos(angle) + yy * np.sin(angle)
        pattern = 0.5 + amp * np.sin(2 * np.pi * freq * grid + phase)
        tint = tints[c % len(tints)]
        img = pattern[None, :, :] * (0.55 + 0.45 * tint[:, None, None])
        img = img + rng.normal(0.0, 0.10, size=img.shape)
        images[i] = (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return images, labels


def write_synthetic_dataset(directory, n_train: int = 5000, n_val: int = 1000,
                            seed: int = 7, classes: int = 10, size: int = 32):
    """Materialize the bundled synthetic dataset as QDS1 train/val dirs."""
    directory = Path(directory)
    xs, ys = make_synthetic_images(n_train, seed, classes, size)
    save_qds1(directory / "train", xs, ys)
    xs, ys = make_synthetic_images(n_val, seed + 1, classes, size)
    save_qds1(directory / "val", xs, ys)
    return directory / "train", directory / "val"
