"""Datasets and the training-time augmentation pipeline.

Sources:

* CIFAR binary batches: records of 1 label byte + 3072 pixel bytes
  (R plane, G plane, B plane; each 32x32 row-major).
* A seeded synthetic dataset of class-specific patterns for CPU-sized runs.

Images are ``float32`` arrays shaped ``N, C, H, W`` with values in [0, 1]
until :func:`normalize_per_channel` standardizes them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CifarFormatError, ConfigError
from .regularizers import DropConfig, cutout, random_erasing
from .rng import Rng

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_RECORD = 1 + CIFAR_PIXELS
CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
DATA_DIR_ENV = "MAXDROP_DATA_DIR"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    classes: int
    channel_stats: Optional[tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class AugmentPolicy:
    pad: int = 4
    crop: int = 32
    flip_prob: float = 0.5
    cutout_enabled: bool = False
    erasing_enabled: bool = False

    def validate(self, side: Optional[int] = None) -> None:
        if self.pad < 0:
            raise ConfigError("pad", f"must be >= 0, got {self.pad}")
        if self.crop < 1:
            raise ConfigError("crop", f"must be >= 1, got {self.crop}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob", f"must be in [0, 1], got {self.flip_prob}")
        if side is not None and self.crop > side + 2 * self.pad:
            raise ConfigError("crop", f"{self.crop} exceeds padded side {side + 2 * self.pad}")


def _read_cifar_file(path: Path, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        offset = len(raw) - len(raw) % CIFAR_RECORD
        raise CifarFormatError(
            f"{path}: size {len(raw)} bytes is not a multiple of {CIFAR_RECORD} "
            f"(trailing partial record starts at byte offset {offset})"
        )
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise CifarFormatError(
            f"{path}: label {labels[i]} >= {num_classes} classes in record {i} (byte offset {i * CIFAR_RECORD})"
        )
    pixels = recs[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return pixels, labels


def load_cifar(path, split: str = "train", num_classes: int = 10, limit: Optional[int] = None) -> Dataset:
    """Load a CIFAR binary file, or the standard batch files of ``split`` from a directory."""
    path = Path(path)
    if path.is_dir():
        files = [path / f for f in CIFAR10_FILES[split]]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR batch files: {', '.join(missing)}")
    else:
        files = [path]
    parts = [_read_cifar_file(f, num_classes) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    images = pixels.astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels, split, num_classes)


def save_cifar(dataset: Dataset, path) -> None:
    """Write ``dataset`` (values in [0, 1]) in the CIFAR binary record format."""
    imgs = dataset.images
    if imgs.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ValueError(f"CIFAR records need 3x32x32 images, got {imgs.shape[1:]}")
    pixels = np.rint(imgs.astype(np.float64) * 255.0).clip(0, 255).astype(np.uint8)
    recs = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = dataset.labels
    recs[:, 1:] = pixels.reshape(len(dataset), -1)
    Path(path).write_bytes(recs.tobytes())


def data_dir(flag: Optional[str] = None) -> Optional[Path]:
    """``--data-dir`` if given, else ``$MAXDROP_DATA_DIR``."""
    value = flag or os.environ.get(DATA_DIR_ENV)
    return Path(value) if value else None


def _class_pattern(k: int, side: int) -> np.ndarray:
    """A 3-channel template for class ``k``: an oriented grating times a class colour."""
    yy, xx = np.mgrid[0:side, 0:side] / side
    angle = np.pi * (k * 0.382 % 1.0)
    freq = 1.5 + (k % 3)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    hue = 2 * np.pi * k / 7.0
    colour = 0.5 + 0.45 * np.cos(hue + np.array([0.0, 2.1, 4.2]))
    return wave[None] * colour[:, None, None]


def synth_dataset(
    seed: int,
    n_per_class: int,
    classes: int = 10,
    side: int = 16,
    split: str = "train",
    noise: float = 0.35,
    max_shift: int = 3,
) -> Dataset:
    """Seeded class-conditional images: a per-class grating, randomly shifted, plus noise.

    ``split`` picks an independent stream, so train and test never share samples.
    """
    if classes < 2:
        raise ValueError(f"synth_dataset: need at least 2 classes, got {classes}")
    rng = Rng(seed).split(f"synth/{split}")
    big = side + 2 * max_shift
    templates = [_class_pattern(k, big) for k in range(classes)]
    n = n_per_class * classes
    labels = np.repeat(np.arange(classes), n_per_class)
    order = rng.permutation(n)
    labels = labels[order]
    images = np.empty((n, 3, side, side), dtype=np.float32)
    shifts = rng.integers(0, 2 * max_shift + 1, size=(n, 2))
    gains = rng.uniform(0.6, 1.0, size=n)
    noise_img = rng.normal(0.0, noise, size=(n, 3, side, side))
    for i, k in enumerate(labels):
        dy, dx = shifts[i]
        img = templates[k][:, dy : dy + side, dx : dx + side] * gains[i] + noise_img[i]
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), split, classes)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize_per_channel(dataset: Dataset, stats: Optional[tuple[np.ndarray, np.ndarray]] = None) -> Dataset:
    """Standardize each channel.

    The train split computes its own statistics; any other split must be
    given the train statistics explicitly.
    """
    if stats is None:
        if dataset.split != "train":
            raise ValueError(f"normalize_per_channel: {dataset.split!r} split must reuse train statistics")
        stats = channel_stats(dataset.images)
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    zero = np.nonzero(std == 0)[0]
    if zero.size:
        raise ValueError(f"normalize_per_channel: channel {int(zero[0])} has zero variance")
    x = (dataset.images.astype(np.float64) - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(dataset, images=x.astype(np.float32), channel_stats=(mean, std))


def denormalize(images: np.ndarray, stats: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    return images.astype(np.float64) * std[None, :, None, None] + mean[None, :, None, None]


def augment(
    img: np.ndarray,
    policy: AugmentPolicy,
    rng: Optional[Rng],
    drop: Optional[DropConfig] = None,
    offset: Optional[tuple[int, int]] = None,
    flip: Optional[bool] = None,
) -> np.ndarray:
    """Zero-pad, random crop, random horizontal mirror, then optional Cutout/RandomErasing.

    ``offset`` and ``flip`` pin the random choices.
    """
    c, h, w = img.shape
    p, s = policy.pad, policy.crop
    padded = np.zeros((c, h + 2 * p, w + 2 * p), dtype=img.dtype)
    padded[:, p : p + h, p : p + w] = img
    if offset is None:
        offset = (int(rng.integers(0, h + 2 * p - s + 1)), int(rng.integers(0, w + 2 * p - s + 1)))
    oy, ox = offset
    out = padded[:, oy : oy + s, ox : ox + s]
    if flip is None:
        flip = policy.flip_prob > 0 and rng.random() < policy.flip_prob
    if flip:
        out = out[:, :, ::-1]
    out = np.ascontiguousarray(out)
    if policy.cutout_enabled or policy.erasing_enabled:
        drop = drop or DropConfig()
        if policy.cutout_enabled:
            out = cutout(out, drop.cutout_size, rng)
        if policy.erasing_enabled:
            out = random_erasing(out, drop, rng)
    return out


def augment_batch(images: np.ndarray, policy: AugmentPolicy, rng: Rng, drop: Optional[DropConfig] = None) -> np.ndarray:
    return np.stack([augment(img, policy, rng, drop) for img in images])
