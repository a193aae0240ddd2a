"""
Procedural toy image datasets, (n, C, H, W) in [-1, 1].
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

SHAPES3_CLASSES = ("disc", "square", "cross")


@dataclass(frozen=True)
class Dataset:
    name: str
    images: np.ndarray
    labels: Optional[np.ndarray] = None

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def __len__(self) -> int:
        return int(self.images.shape[0])


def _grid(size: int):
    coords = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(coords, coords, indexing="ij")


def _blobs(n: int, size: int, rng: np.random.Generator):
    yy, xx = _grid(size)
    centers = rng.uniform(0.25 * size, 0.75 * size, size=(n, 2))
    sigma = rng.uniform(0.08 * size, 0.16 * size, size=n)
    r2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    return 2.0 * np.exp(-r2 / (2.0 * sigma[:, None, None] ** 2)) - 1.0, None


def _rings(n: int, size: int, rng: np.random.Generator):
    yy, xx = _grid(size)
    centers = rng.uniform(0.4 * size, 0.6 * size, size=(n, 2))
    radius = rng.uniform(0.15 * size, 0.3 * size, size=n)
    width = 0.06 * size
    r = np.sqrt((yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2)
    return 2.0 * np.exp(-((r - radius[:, None, None]) ** 2) / (2.0 * width**2)) - 1.0, None


def _shapes3(n: int, size: int, rng: np.random.Generator):
    yy, xx = _grid(size)
    labels = np.arange(n) % len(SHAPES3_CLASSES)
    centers = rng.uniform(0.35 * size, 0.65 * size, size=(n, 2))
    extent = rng.uniform(0.15 * size, 0.25 * size, size=n)
    dy = np.abs(yy[None] - centers[:, 0, None, None])
    dx = np.abs(xx[None] - centers[:, 1, None, None])
    e = extent[:, None, None]
    disc = dy**2 + dx**2 <= e**2
    square = np.maximum(dy, dx) <= e
    bar = 0.3 * e
    cross = ((dy <= bar) & (dx <= e)) | ((dx <= bar) & (dy <= e))
    inside = np.where(labels[:, None, None] == 0, disc, np.where(labels[:, None, None] == 1, square, cross))
    return np.where(inside, 1.0, -1.0), labels


def _twomode(n: int, size: int, rng: np.random.Generator):
    values = np.where(np.arange(n) % 2 == 0, 0.5, -0.5)
    values = values[rng.permutation(n)]
    return np.broadcast_to(values[:, None, None], (n, size, size)).copy(), None


GENERATORS: Dict[str, Callable] = {
    "blobs": _blobs,
    "rings": _rings,
    "shapes3": _shapes3,
    "twomode": _twomode,
}


def gen_dataset(name: str, n: int, seed: int, image_size: int = 16, channels: int = 1) -> Dataset:
    """Generate `n` images of a named toy dataset, deterministically per seed.

    Raises:
        ConfigError: unknown dataset name or non-positive size.
    """
    if name not in GENERATORS:
        raise ConfigError(f"Unknown dataset '{name}' (choose from {', '.join(GENERATORS)})")
    if n <= 0:
        raise ConfigError(f"dataset size must be positive, got {n}")
    rng = np.random.default_rng(seed)
    images, labels = GENERATORS[name](n, image_size, rng)
    images = np.clip(images, -1.0, 1.0)
    images = np.repeat(images[:, None], channels, axis=1)
    logger.debug(f"Generated {n} '{name}' images with seed {seed}")
    return Dataset(name=name, images=images, labels=labels)


def random_hflip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mirror each image left-right with probability 1/2."""
    flip = rng.random(images.shape[0]) < 0.5
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out
