"""Image classification datasets: a synthetic shapes generator and an IDX reader."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_core import DTYPE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [-1, 1]
    labels: np.ndarray  # (N,) int64
    classes: int
    split: str = "train"
    source: str = "synthetic-shapes"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.split, self.source)


# --------------------------------------------------------------------------
# Synthetic shapes
#
# Each renderer gets rotated, centered coordinates (u, v) scaled so the image
# spans [-1, 1], and returns a boolean mask.


def _bar(u, v):
    return (np.abs(v) < 0.14) & (np.abs(u) < 0.75)


def _cross(u, v):
    return _bar(u, v) | _bar(v, u)


def _disk(u, v):
    return np.hypot(u, v) < 0.55


def _ring(u, v):
    return np.abs(np.hypot(u, v) - 0.6) < 0.14


def _square(u, v):
    return np.abs(np.maximum(np.abs(u), np.abs(v)) - 0.5) < 0.13


def _triangle(u, v):
    return (v > -0.45) & (v < 0.9 - 1.8 * np.abs(u)) & (np.abs(u) < 0.75)


def _corner(u, v):
    return ((np.abs(u + 0.3) < 0.14) & (np.abs(v) < 0.6)) | \
           ((np.abs(v - 0.46) < 0.14) & (u > -0.44) & (u < 0.5))


def _bars2(u, v):
    return (np.abs(np.abs(v) - 0.35) < 0.12) & (np.abs(u) < 0.7)


SHAPES = {
    "bar": _bar,
    "cross": _cross,
    "disk": _disk,
    "ring": _ring,
    "square": _square,
    "triangle": _triangle,
    "corner": _corner,
    "bars2": _bars2,
}


def synthetic_shapes(n_per_class: int, classes: int, image_size: int,
                     rng: np.random.Generator, noise_std: float = 0.2,
                     split: str = "train") -> Dataset:
    """Noisy grayscale shapes under random rotation, scale and translation.

    Foreground is +1, background -1, plus Gaussian pixel noise, clipped to
    [-1, 1].  Samples are interleaved by class so every prefix is nearly
    balanced.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if classes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} shape classes available")
    renderers = list(SHAPES.values())[:classes]
    n = n_per_class * classes
    labels = np.tile(np.arange(classes), n_per_class)
    grid = (np.arange(image_size) + 0.5) / image_size * 2.0 - 1.0
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((n, 1, image_size, image_size), dtype=DTYPE)
    angles = rng.uniform(0.0, 2.0 * np.pi, n)
    scales = rng.uniform(0.75, 1.05, n)
    shifts = rng.uniform(-0.15, 0.15, (n, 2))
    noise = rng.standard_normal(images.shape)
    for i in range(n):
        c, s = np.cos(angles[i]), np.sin(angles[i])
        dx, dy = xx - shifts[i, 0], yy - shifts[i, 1]
        u = (c * dx + s * dy) / scales[i]
        v = (-s * dx + c * dy) / scales[i]
        mask = renderers[labels[i]](u, v)
        images[i, 0] = np.where(mask, 1.0, -1.0)
    images = np.clip(images + noise_std * noise, -1.0, 1.0)
    return Dataset(images, labels.astype(np.int64), classes, split, "synthetic-shapes")


# --------------------------------------------------------------------------
# IDX files


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{what}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxFormatError(f"{what}: truncated data, expected {count} bytes "
                             f"after header, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, classes: int | None = None,
             split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels map linearly from [0, 255] to [-1, 1]."""
    pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if len(pixels) != len(labels):
        raise IdxFormatError(f"{len(pixels)} images but {len(labels)} labels")
    images = pixels.astype(DTYPE)[:, None] / 127.5 - 1.0
    labels = labels.astype(np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, classes, split, "idx-files")


def write_idx(images_path, labels_path, pixels, labels) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *pixels.shape))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())
