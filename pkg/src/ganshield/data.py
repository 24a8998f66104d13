"""Datasets: the synthetic two-Gaussian mixture and IDX image files.

All features are mapped into [-1, 1]; the map is recorded so samples can be
taken back to raw units.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TWO_GAUSSIAN_CENTERS = np.array([[3.0, 3.0], [-3.0, -3.0]])
TWO_GAUSSIAN_SCALE = 8.0


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    """Affine map ``x -> (x - offset) / scale`` followed by clipping to [-1, 1]."""

    offset: float = 0.0
    scale: float = 1.0

    def normalize(self, x):
        return np.clip((np.asarray(x, dtype=np.float64) - self.offset) / self.scale, -1.0, 1.0)

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale + self.offset


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray | None
    name: str
    normalization: Normalization = field(default_factory=Normalization)
    split: str = "all"
    indices: np.ndarray | None = None

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"dataset features must be an (N, d) array, got {X.shape}")
        if X.size and np.abs(X).max() > 1.0:
            raise ValueError("dataset features must lie in [-1, 1]")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = np.array(self.y, dtype=np.int64)
            if y.shape != (X.shape[0],):
                raise ValueError(f"label count {y.shape} does not match {X.shape[0]} samples")
            if y.size and y.min() < 0:
                raise ValueError("labels must be non-negative")
            y.setflags(write=False)
            object.__setattr__(self, "y", y)
        idx = np.arange(X.shape[0]) if self.indices is None else np.array(self.indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if self.y is not None else 0

    def subset(self, idx, split: str) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        y = None if self.y is None else self.y[idx]
        return replace(self, X=self.X[idx], y=y, split=split, indices=self.indices[idx])


def make_two_gaussians(n_per_class: int, seed: int) -> Dataset:
    """Unit-variance Gaussians at (3, 3) (label 0) and (-3, -3) (label 1), scaled by 1/8."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    raw = np.concatenate([c + rng.standard_normal((n_per_class, 2)) for c in TWO_GAUSSIAN_CENTERS])
    y = np.repeat([0, 1], n_per_class)
    norm = Normalization(0.0, TWO_GAUSSIAN_SCALE)
    return Dataset(norm.normalize(raw), y, "two-gaussians", norm)


def split(ds: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle into disjoint train/valid/test parts covering ``ds``."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(round(fractions[0] * len(ds)))
    n_valid = int(round(fractions[1] * len(ds)))
    parts = np.split(perm, [n_train, n_train + n_valid])
    return tuple(ds.subset(np.sort(p), tag) for p, tag in zip(parts, ("train", "valid", "test")))


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file into an array of its declared shape."""
    with _open(path) as f:
        buf = f.read()
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(buf) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{rank}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header < count:
        raise IdxFormatError(f"{path}: truncated payload, {len(buf) - header} of {count} bytes present")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def avg_pool(images: np.ndarray, size: int) -> np.ndarray:
    n, h, w = images.shape
    if h % size or w % size:
        raise ValueError(f"cannot pool {h}x{w} images to {size}x{size}")
    fh, fw = h // size, w // size
    return images.reshape(n, size, fh, size, fw).mean(axis=(2, 4))


def load_idx_images(images_path, labels_path, limit: int | None = None, downsample_to: int | None = None) -> Dataset:
    """First ``limit`` images, average-pooled and scaled from [0, 255] to [-1, 1]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        if limit > images.shape[0]:
            raise IdxFormatError(f"limit {limit} exceeds the {images.shape[0]} samples in {images_path}")
        images, labels = images[:limit], labels[:limit]
    pix = images.astype(np.float64)
    if downsample_to is not None:
        pix = avg_pool(pix, downsample_to)
    norm = Normalization(127.5, 127.5)
    return Dataset(norm.normalize(pix.reshape(pix.shape[0], -1)), labels, Path(images_path).name, norm)


def select_classes(ds: Dataset, classes) -> Dataset:
    """Keep samples of ``classes`` and relabel them 0..len(classes)-1."""
    classes = list(classes)
    mask = np.isin(ds.y, classes)
    remap = {c: i for i, c in enumerate(classes)}
    sub = ds.subset(np.flatnonzero(mask), ds.split)
    return replace(sub, y=np.array([remap[int(c)] for c in sub.y]))
