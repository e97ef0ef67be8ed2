"""Datasets: MNIST IDX ingestion, seeded splits, preprocessing and
synthetic Gaussian-cluster images."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CountMismatchError, MagicMismatchError, TruncatedFileError
from .rng import substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    """Images (n, channels, h, w) float64 and integer labels for one split."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx], split=split or self.split)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array of its declared shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the IDX magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise MagicMismatchError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims)) if dims else 0
    if len(raw) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (magic 0x08 type code, big-endian dims)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1] by /255."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    imgs = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(imgs, labels.astype(np.int64), num_classes, split, f"idx:{Path(images_path).name}")


def load_mnist(directory, split: str = "train") -> Dataset:
    d = Path(directory)
    img, lab = MNIST_FILES[split]
    ip, lp = d / img, d / lab
    if not ip.exists() and (d / (img + ".gz")).exists():
        ip, lp = d / (img + ".gz"), d / (lab + ".gz")
    ds = load_idx(ip, lp, split=split)
    ds.provenance = f"mnist:{d}:{split}"
    return ds


# ---------------------------------------------------------------------------
# Splits and preprocessing
# ---------------------------------------------------------------------------


def split(dataset: Dataset, validation_count: int, rng_seed: int) -> tuple[Dataset, Dataset]:
    """Seeded disjoint (train, validation) partition."""
    n = len(dataset)
    if not 0 <= validation_count < n:
        raise ValueError(f"validation_count must lie in [0, {n})")
    perm = substream(rng_seed, "split").permutation(n)
    val = np.sort(perm[:validation_count])
    train = np.sort(perm[validation_count:])
    return dataset.subset(train, "train"), dataset.subset(val, "validation")


def gcn(images: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Global contrast normalisation: per image, subtract the mean and divide by max(std, eps)."""
    x = np.asarray(images, dtype=np.float64)
    if x.size == 0:
        raise ValueError("gcn needs a nonempty batch")
    flat = x.reshape(len(x), -1)
    mu = flat.mean(axis=1, keepdims=True)
    centred = flat - mu
    std = np.sqrt(np.mean(centred * centred, axis=1, keepdims=True))
    return (centred / np.maximum(std, eps)).reshape(x.shape)


def augment_hflip(images: np.ndarray, rng_seed: int | None = None, mask: np.ndarray | None = None) -> np.ndarray:
    """Flip each image left-right with probability 0.5 (or where ``mask`` is true)."""
    x = np.asarray(images)
    if mask is None:
        mask = substream(rng_seed, "hflip").random(len(x)) < 0.5
    out = x.copy()
    out[mask] = x[mask][..., ::-1]
    return out


def synth_clusters(num_classes: int, per_class: int, dims, separation: float, rng_seed: int) -> Dataset:
    """Gaussian class clusters shaped like images.

    Class means are random directions scaled to norm ``separation``;
    samples add unit-variance isotropic noise. ``dims`` is (c, h, w) or an int
    (treated as (1, 1, dims)).
    """
    if isinstance(dims, int):
        dims = (1, 1, dims)
    dims = tuple(int(d) for d in dims)
    if num_classes <= 0 or per_class <= 0 or min(dims) <= 0:
        raise ValueError("num_classes, per_class and dims must be positive")
    k = int(np.prod(dims))
    rng = substream(rng_seed, "synth")
    dirs = rng.standard_normal((num_classes, k))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    labels = np.repeat(np.arange(num_classes), per_class)
    x = means[labels] + rng.standard_normal((len(labels), k))
    perm = rng.permutation(len(labels))
    return Dataset(x[perm].reshape((len(labels),) + dims), labels[perm], num_classes, "train",
                   f"synthetic:{num_classes}x{per_class}:{dims}:sep={separation}:seed={rng_seed}")


# ---------------------------------------------------------------------------
# Binary dataset cache
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"RDLD"
_CACHE_VERSION = 1


def save_dataset(dataset: Dataset, path) -> None:
    """Single-file mirror: magic, version, n, c, h, w, classes (u32 LE),
    split and provenance strings, then float64 images and int64 labels (LE)."""
    n = len(dataset)
    c, h, w = dataset.images.shape[1:]
    split_b = dataset.split.encode()
    prov = dataset.provenance.encode()
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<6I", _CACHE_VERSION, n, c, h, w, dataset.num_classes))
        fh.write(struct.pack("<I", len(split_b)) + split_b)
        fh.write(struct.pack("<I", len(prov)) + prov)
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<i8").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _CACHE_MAGIC:
        raise MagicMismatchError(f"{path}: not a dataset cache file")
    version, n, c, h, w, classes = struct.unpack("<6I", raw[4:28])
    if version != _CACHE_VERSION:
        raise ValueError(f"{path}: unsupported dataset cache version {version}")
    pos = 28
    (ls,) = struct.unpack("<I", raw[pos : pos + 4])
    split_name = raw[pos + 4 : pos + 4 + ls].decode()
    pos += 4 + ls
    (lp,) = struct.unpack("<I", raw[pos : pos + 4])
    prov = raw[pos + 4 : pos + 4 + lp].decode()
    pos += 4 + lp
    count = n * c * h * w
    if len(raw) < pos + 8 * count + 8 * n:
        raise TruncatedFileError(f"{path}: truncated dataset cache")
    images = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=pos + 8 * count).astype(np.int64)
    return Dataset(images, labels, classes, split_name, prov)
