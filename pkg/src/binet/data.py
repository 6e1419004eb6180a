"""Dataset loaders: MNIST (IDX), CIFAR-10 (binary batches) and synthetic sets.

All loaders return :class:`~binet.train.DatasetSplit` pairs of normalized
float32 NCHW images and int64 labels.
"""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .train import DatasetSplit

MNIST_MEAN, MNIST_STD = 0.1307, 0.3081
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DatasetError(ValueError):
    category = "dataset"


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class MissingDatasetError(DatasetError, FileNotFoundError):
    pass


def _read(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _find(directory: Path, name: str) -> Path:
    for cand in (name, name + ".gz", name.replace("-idx", ".idx")):
        p = directory / cand
        if p.exists():
            return p
    raise MissingDatasetError(f"{name} not found in {directory}")


def parse_idx_images(buf: bytes) -> np.ndarray:
    """uint8 array (N, rows, cols) from an IDX3 image file."""
    if len(buf) < 16:
        raise TruncatedFileError("IDX image header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != 2051:
        raise BadMagicError(f"IDX image magic {magic}, expected 2051")
    need = 16 + n * rows * cols
    if len(buf) != need:
        raise TruncatedFileError(f"IDX image file has {len(buf)} bytes, expected {need}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def parse_idx_labels(buf: bytes, num_classes: int = 10) -> np.ndarray:
    if len(buf) < 8:
        raise TruncatedFileError("IDX label header truncated")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != 2049:
        raise BadMagicError(f"IDX label magic {magic}, expected 2049")
    if len(buf) != 8 + n:
        raise TruncatedFileError(f"IDX label file has {len(buf)} bytes, expected {8 + n}")
    labels = np.frombuffer(buf, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise LabelRangeError(f"label {labels.max()} outside [0, {num_classes})")
    return labels


def load_mnist(directory, limit_train: Optional[int] = None, limit_test: Optional[int] = None):
    """(train, test) splits of shape N x 1 x 28 x 28, normalized with mean 0.1307 / std 0.3081."""
    d = Path(directory)
    out = []
    for split, limit in (("train", limit_train), ("test", limit_test)):
        img_name, lab_name = MNIST_FILES[split]
        images = parse_idx_images(_read(_find(d, img_name)))
        labels = parse_idx_labels(_read(_find(d, lab_name)))
        if len(images) != len(labels):
            raise DatasetError(f"MNIST {split}: {len(images)} images vs {len(labels)} labels")
        if limit is not None:
            images, labels = images[:limit], labels[:limit]
        x = (images.astype(np.float32) / 255.0 - MNIST_MEAN) / MNIST_STD
        out.append(DatasetSplit(x[:, None].astype(np.float32), labels, 10))
    return out[0], out[1]


def parse_cifar_batch(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        raise TruncatedFileError(f"CIFAR-10 batch of {len(buf)} bytes is not a whole number of records")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise LabelRangeError(f"CIFAR-10 label {labels.max()} outside [0, 10)")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(directory, limit_train: Optional[int] = None, limit_test: Optional[int] = None):
    """(train, test) splits from ``data_batch_1..5.bin`` and ``test_batch.bin``."""
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    mean = np.array(CIFAR_MEAN, np.float32)[:, None, None]
    std = np.array(CIFAR_STD, np.float32)[:, None, None]
    out = []
    for names, limit in (([f"data_batch_{i}.bin" for i in range(1, 6)], limit_train), (["test_batch.bin"], limit_test)):
        imgs, labs = [], []
        for n in names:
            p = d / n
            if not p.exists():
                raise MissingDatasetError(f"{n} not found in {d}")
            x, y = parse_cifar_batch(p.read_bytes())
            imgs.append(x)
            labs.append(y)
        x, y = np.concatenate(imgs), np.concatenate(labs)
        if limit is not None:
            x, y = x[:limit], y[:limit]
        x = ((x.astype(np.float32) / 255.0) - mean) / std
        out.append(DatasetSplit(x.astype(np.float32), y, 10))
    return out[0], out[1]


SYNTH_KINDS = ("two-gaussians", "patterns")


def synth_dataset(kind: str = "two-gaussians", seed: int = 0, n_train: int = 1024, n_test: int = 512):
    """Deterministic synthetic splits.

    ``two-gaussians``: linearly separable 2-D points, shape (N, 1, 1, 2), 2 classes.
    ``patterns``: 4-class 1x8x8 images of a bright quadrant plus noise.
    """
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    if kind == "two-gaussians":
        y = rng.integers(0, 2, n)
        centers = np.array([[-2.0, -2.0], [2.0, 2.0]])
        x = centers[y] + rng.standard_normal((n, 2)) * 0.6
        x = x.astype(np.float32).reshape(n, 1, 1, 2)
        classes = 2
    elif kind == "patterns":
        y = rng.integers(0, 4, n)
        x = rng.standard_normal((n, 1, 8, 8)).astype(np.float32) * 0.5
        for q in range(4):
            r, c = divmod(q, 2)
            x[y == q, :, r * 4 : r * 4 + 4, c * 4 : c * 4 + 4] += 1.5
        classes = 4
    else:
        raise DatasetError(f"unknown synthetic dataset {kind!r}; expected one of {SYNTH_KINDS}")
    y = y.astype(np.int64)
    return (
        DatasetSplit(np.ascontiguousarray(x[:n_train]), y[:n_train], classes),
        DatasetSplit(np.ascontiguousarray(x[n_train:]), y[n_train:], classes),
    )


def augment_crop_flip(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded image plus random horizontal flip."""
    n, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        img = xp[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = img[:, :, ::-1] if flip[i] else img
    return out


def default_mnist_dir() -> Optional[Path]:
    """MNIST location from $BINET_MNIST_DIR, else ./data/mnist or /root/data/mnist if present."""
    cands = [os.environ.get("BINET_MNIST_DIR"), "data/mnist", "/root/data/mnist"]
    for c in cands:
        if c and (Path(c) / MNIST_FILES["train"][0]).exists():
            return Path(c)
    return None


def load_dataset(name: str, path=None, seed: int = 0, limit_train=None, limit_test=None):
    """Dispatch on dataset name: ``mnist``, ``cifar10`` or ``synth:<kind>``."""
    if name == "mnist":
        d = path or default_mnist_dir()
        if d is None:
            raise MissingDatasetError("MNIST directory not given and not found in default locations")
        return load_mnist(d, limit_train, limit_test)
    if name == "cifar10":
        if path is None:
            raise MissingDatasetError("cifar10 needs a data directory")
        return load_cifar10(path, limit_train, limit_test)
    if name.startswith("synth:"):
        tr, te = synth_dataset(name.split(":", 1)[1], seed)
        return tr.subset(limit_train), te.subset(limit_test)
    raise DatasetError(f"unknown dataset {name!r}")
