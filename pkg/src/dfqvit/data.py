"""Procedural ten-class toy image dataset and the two baseline calibration sets."""

from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass

import numpy as np

NUM_CLASSES = 10
IMAGE_SIZE = 32
CLASS_NAMES = (
    "disk", "square", "triangle", "ring", "hstripes",
    "vstripes", "plus", "cross", "checker", "diamond",
)
_SPLIT_CODES = {"train": 1, "test": 2}

# same convention as the synthesis initializer
NOISE_MEAN = 0.5
NOISE_STD = 0.25


@dataclass
class ToyDataset:
    images: np.ndarray  # (n, 3, S, S) in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: str
    seed: int

    def __len__(self) -> int:
        return len(self.labels)


def _shape_mask(cls: int, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    box = np.maximum(ax, ay) <= r
    period = max(2.0, r / 3.0)
    if cls == 0:
        return dx * dx + dy * dy <= r * r
    if cls == 1:
        return np.maximum(ax, ay) <= 0.8 * r
    if cls == 2:
        return (dy >= -0.8 * r) & (dy <= 0.8 * r) & (ax <= 0.5 * (dy + 0.8 * r))
    if cls == 3:
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if cls == 4:
        return box & (np.floor((dy + r) / period) % 2 == 0)
    if cls == 5:
        return box & (np.floor((dx + r) / period) % 2 == 0)
    if cls == 6:
        arm = 0.28 * r
        return ((ax <= arm) & (ay <= r)) | ((ay <= arm) & (ax <= r))
    if cls == 7:
        return box & (np.abs(ax - ay) <= 0.35 * r)
    if cls == 8:
        return box & ((np.floor((dx + r) / period) + np.floor((dy + r) / period)) % 2 == 0)
    if cls == 9:
        return ax + ay <= r
    raise ValueError(f"unknown class {cls}")


def render(cls: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Draw one ``(3, size, size)`` image of class ``cls``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = rng.uniform(0.22, 0.36) * size
    cx, cy = rng.uniform(r * 0.8, size - r * 0.8, size=2)
    mask = _shape_mask(cls, xx - cx, yy - cy, r).astype(np.float64)
    fg = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.75, 1.0)))
    bg = rng.uniform(0.0, 0.35, size=3)
    img = bg[:, None, None] + mask[None] * (fg - bg)[:, None, None]
    img += rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _split_rng(seed: int, split: str) -> np.random.Generator:
    if split not in _SPLIT_CODES:
        raise ValueError(f"split must be one of {sorted(_SPLIT_CODES)}, got {split!r}")
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_CODES[split]]))


def generate(seed: int, count: int, split: str = "train",
             num_classes: int = NUM_CLASSES, image_size: int = IMAGE_SIZE) -> ToyDataset:
    """Balanced dataset: class counts differ by at most one."""
    if count < num_classes:
        raise ValueError(f"count must be at least the number of classes ({num_classes}), got {count}")
    rng = _split_rng(seed, split)
    labels = rng.permutation(np.arange(count) % num_classes).astype(np.int64)
    images = np.stack([render(int(c), rng, image_size) for c in labels])
    return ToyDataset(images, labels, split, seed)


def image_digest(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes()).hexdigest()


def real_calibration_subset(dataset: ToyDataset, n: int = 16, seed: int = 0) -> list:
    """Uniform sample of ``n`` images without replacement."""
    if n > len(dataset):
        raise ValueError(f"requested {n} images from a dataset of {len(dataset)}")
    if n < 1:
        raise ValueError("n must be positive")
    idx = np.random.default_rng(seed).permutation(len(dataset))[:n]
    return [dataset.images[i] for i in idx]


def gaussian_noise_images(n: int, shape=(3, IMAGE_SIZE, IMAGE_SIZE), seed: int = 0,
                          mean: float = NOISE_MEAN, std: float = NOISE_STD) -> list:
    """i.i.d. per-pixel Gaussian images clipped to [0, 1], no optimization."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    return [np.clip(rng.normal(mean, std, size=shape), 0.0, 1.0) for _ in range(n)]
