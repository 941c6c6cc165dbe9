"""Image datasets in the CIFAR-10 binary record format.

A record is one label byte followed by 3072 pixel bytes (1024 R, 1024 G,
1024 B, row-major). Standard CIFAR-10 ships ``data_batch_1..5.bin`` and
``test_batch.bin``; :func:`write_synthetic_dataset` writes the same layout so
every tool here runs without the real download.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD_BYTES = 1 + 3 * 32 * 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, 32, 32) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, limit: int | None) -> "Dataset":
        if limit is None:
            return self
        if limit > len(self):
            raise ValueError(f"sample_limit {limit} exceeds dataset size {len(self)}")
        return Dataset(self.images[:limit], self.labels[:limit])

    def batches(self, batch_size: int):
        for i in range(0, len(self), batch_size):
            yield self.images[i : i + batch_size], self.labels[i : i + batch_size]


def decode_records(raw: bytes) -> Dataset:
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise DatasetFormatError(f"{len(raw)} bytes is not a whole number of {RECORD_BYTES}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetFormatError(f"label byte {labels.max()} outside 0..9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels)


def encode_records(images_u8: np.ndarray, labels: np.ndarray) -> bytes:
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    if images_u8.shape[1] != RECORD_BYTES - 1:
        raise DatasetFormatError(f"images must be 3x32x32, got {images_u8.shape[1]} bytes per image")
    rec = np.concatenate([np.asarray(labels, np.uint8)[:, None], images_u8], axis=1)
    return rec.tobytes()


def to_u8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(images) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def load_dataset(path: str | os.PathLike, split: str = "test", shuffle_seed: int | None = None) -> Dataset:
    """Load a CIFAR-10 binary directory (``split`` in {train, test}) or a single ``.bin`` file."""
    p = Path(path)
    if p.is_file():
        files = [p]
    else:
        names = TRAIN_FILES if split == "train" else (TEST_FILE,)
        files = [p / n for n in names if (p / n).exists()]
        if not files:
            raise FileNotFoundError(f"no {split} batch files under {p}")
    parts = [decode_records(f.read_bytes()) for f in files]
    ds = Dataset(np.concatenate([d.images for d in parts]), np.concatenate([d.labels for d in parts]))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(ds))
        ds = Dataset(ds.images[order], ds.labels[order])
    return ds


# --------------------------------------------------------------------------- synthetic stand-in

SHAPES = ("disk", "square", "triangle", "plus", "diamond")
TEXTURES = ("stripes", "speckle")


def _shape_mask(kind: str, yy, xx, cy, cx, r) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= 0.85 * r) & (np.abs(dx) <= 0.85 * r)
    if kind == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r + 2 * np.abs(dx))
    if kind == "plus":
        arm = 0.38 * r
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1.15 * r
    raise ValueError(kind)


def _texture(kind: str, yy, xx, rng) -> np.ndarray:
    if kind == "stripes":
        phase = rng.uniform(0, 2 * np.pi)
        theta = rng.choice([0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4])
        period = rng.uniform(2.6, 3.4)
        u = np.cos(theta) * xx + np.sin(theta) * yy
        return np.sign(np.sin(2 * np.pi * u / period + phase))
    # grain: i.i.d. binary pixels, the kind of surface pixel noise resembles
    return rng.choice([-1.0, 1.0], size=yy.shape)


def _clutter(yy, xx, rng) -> np.ndarray:
    """Band-limited random texture with a roughly 1/f amplitude spectrum."""
    f = np.fft.fftfreq(32)
    fy, fx = np.meshgrid(f, f, indexing="ij")
    radius = np.hypot(fy, fx)
    amp = np.where(radius > 0, 1.0 / np.maximum(radius, 1 / 32), 0.0)
    spec = amp * np.exp(2j * np.pi * rng.random((32, 32)))
    tex = np.real(np.fft.ifft2(spec))
    return tex / (tex.std() + 1e-12)


def synthetic_image(label: int, rng: np.random.Generator) -> np.ndarray:
    """One 3x32x32 image: cluttered background, untextured distractors and a
    textured object whose silhouette and surface texture determine the class."""
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    base = rng.uniform(0.15, 0.85, size=3)
    slope = rng.normal(0, 0.012, size=(3, 2))
    bg = base[:, None, None] + slope[:, 0, None, None] * (yy - 16) + slope[:, 1, None, None] * (xx - 16)
    for _ in range(2):
        by, bx = rng.uniform(0, 32, 2)
        width = rng.uniform(5, 10)
        blob = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * width**2))
        bg = bg + rng.normal(0, 0.12, size=3)[:, None, None] * blob
    bg = bg + rng.uniform(0.0, 0.06) * _clutter(yy, xx, rng)[None] * rng.uniform(0.5, 1.0, size=3)[:, None, None]
    for _ in range(rng.integers(0, 3)):
        dy, dx = rng.uniform(0, 32, 2)
        d = _shape_mask(SHAPES[rng.integers(len(SHAPES))], yy, xx, dy, dx, rng.uniform(2.5, 5.0))
        bg = np.where(d[None], rng.uniform(0.1, 0.9, size=3)[:, None, None], bg)
    shape = SHAPES[label % len(SHAPES)]
    texture = TEXTURES[label // len(SHAPES)]
    r = rng.uniform(7.0, 11.0)
    cy, cx = rng.uniform(16 - 5, 16 + 5, 2)
    mask = _shape_mask(shape, yy, xx, cy, cx, r)
    colour = rng.uniform(0.1, 0.9, size=3)
    while np.abs(colour - bg[:, int(cy), int(cx)]).max() < 0.3:
        colour = rng.uniform(0.1, 0.9, size=3)
    amp = rng.uniform(0.08, 0.22)
    fill = colour[:, None, None] + amp * _texture(texture, yy, xx, rng)[None]
    img = np.where(mask[None], fill, bg)
    img = img + rng.normal(0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_dataset(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = np.stack([synthetic_image(int(y), rng) for y in labels])
    return to_u8(images), labels


def write_synthetic_dataset(root: str | os.PathLike, n_train: int = 20000, n_test: int = 2000, seed: int = 0) -> Path:
    """Write a CIFAR-format stand-in dataset (train in ``data_batch_1.bin``)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    imgs, labels = synthetic_dataset(n_train, seed)
    (root / TRAIN_FILES[0]).write_bytes(encode_records(imgs, labels))
    imgs, labels = synthetic_dataset(n_test, seed + 1)
    (root / TEST_FILE).write_bytes(encode_records(imgs, labels))
    return root
