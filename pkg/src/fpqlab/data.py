"""MNIST (IDX) and CIFAR (binary batch) loaders, calibration subsets, batching.

Files are read from a root directory: ``$FPQLAB_DATA_ROOT`` unless a path is
passed explicitly. Expected layout::

    <root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
    <root>/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
    <root>/cifar-100-binary/{train,test}.bin
"""

from __future__ import annotations

import gzip
import hashlib
import importlib.util
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

ENV_ROOT = "FPQLAB_DATA_ROOT"

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR10_MEAN, CIFAR10_STD = (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN, CIFAR100_STD = (0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074

DATASETS = ("mnist", "cifar10", "cifar100", "blobs")


class DataError(Exception):
    """Dataset files are missing or malformed."""


class ParseError(DataError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: {msg} at byte offset {offset}")
        self.path = str(path)
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    name: str = ""
    mean: tuple = ()
    std: tuple = ()
    files: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError(f"label {int(self.labels.max())} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes,
                       self.name, self.mean, self.std, list(self.files))

    @property
    def sample_shape(self) -> tuple:
        return self.images.shape[1:]


@dataclass
class CalibrationSet:
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.indices)


def data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(ENV_ROOT)
    if env:
        return Path(env)
    raise DataError(f"no dataset root given; pass --data-root or set {ENV_ROOT}")


def _read(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise DataError(f"missing {stem}[.gz] under {directory}; see README for the expected layout")


def parse_idx_images(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 16:
        raise ParseError(path, len(buf), "truncated IDX image header")
    magic, n, rows, cols = struct.unpack_from(">IIII", buf, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise ParseError(path, 0, f"bad IDX image magic 0x{magic:08x}")
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise ParseError(path, len(buf), f"truncated pixel data ({need} bytes expected)")
    return np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, 1, rows, cols)


def parse_idx_labels(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise ParseError(path, len(buf), "truncated IDX label header")
    magic, n = struct.unpack_from(">II", buf, 0)
    if magic != IDX_LABELS_MAGIC:
        raise ParseError(path, 0, f"bad IDX label magic 0x{magic:08x}")
    if len(buf) < 8 + n:
        raise ParseError(path, len(buf), f"truncated label data ({8 + n} bytes expected)")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def write_idx(path, images: np.ndarray | None = None, labels: np.ndarray | None = None) -> Path:
    """Write uint8 images (n, rows, cols) or labels (n,) as an IDX file."""
    path = Path(path)
    if images is not None:
        arr = np.asarray(images, dtype=np.uint8)
        n, rows, cols = arr.reshape(len(arr), arr.shape[-2], arr.shape[-1]).shape
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols)
    else:
        arr = np.asarray(labels, dtype=np.uint8)
        header = struct.pack(">II", IDX_LABELS_MAGIC, len(arr))
    data = header + arr.tobytes()
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(data)
    else:
        path.write_bytes(data)
    return path


def parse_cifar(buf: bytes, path="<bytes>", record: int = CIFAR10_RECORD) -> tuple[np.ndarray, np.ndarray]:
    label_bytes = record - 3072
    if len(buf) % record:
        full = len(buf) // record
        raise ParseError(path, full * record, f"truncated record {full} ({len(buf) % record} of {record} bytes)")
    rows = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)  # CIFAR-100: fine label is the second byte
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def _normalize(raw: np.ndarray, mean, std) -> np.ndarray:
    x = raw.astype(np.float32) / 255.0
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (x - m) / s


def _load_mnist(root: Path, split: str):
    d = root / "mnist" if (root / "mnist").is_dir() else root
    prefix = "train" if split == "train" else "t10k"
    ip, lp = _find(d, f"{prefix}-images-idx3-ubyte"), _find(d, f"{prefix}-labels-idx1-ubyte")
    images = parse_idx_images(_read(ip), ip)
    labels = parse_idx_labels(_read(lp), lp)
    if len(images) != len(labels):
        raise DataError(f"{ip}: {len(images)} images but {lp} has {len(labels)} labels")
    return images, labels, [ip, lp], 10, MNIST_MEAN, MNIST_STD


def _load_cifar10(root: Path, split: str):
    d = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").is_dir() else root
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    files = [_find(d, n) for n in names]
    parts = [parse_cifar(_read(f), f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return images, labels, files, 10, CIFAR10_MEAN, CIFAR10_STD


def _load_cifar100(root: Path, split: str):
    d = root / "cifar-100-binary" if (root / "cifar-100-binary").is_dir() else root
    f = _find(d, "train.bin" if split == "train" else "test.bin")
    images, labels = parse_cifar(_read(f), f, CIFAR100_RECORD)
    return images, labels, [f], 100, CIFAR100_MEAN, CIFAR100_STD


def make_blobs(n: int = 600, dim: int = 4, classes: int = 3, seed: int = 0, spread: float = 1.0):
    """Gaussian class clusters; a synthetic stand-in used by the tiny-MLP fixtures.

    Cluster centers are fixed; ``seed`` only changes which points are drawn.
    """
    centers = np.random.default_rng(12345).normal(0.0, 2.0, size=(classes, dim))
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    x = centers[labels] + spread * rng.normal(size=(n, dim))
    return x.astype(np.float32), labels.astype(np.int64)


def load(name: str, root=None, split: str = "train", *, subset: int | None = None,
         subset_seed: int = 0) -> Dataset:
    """Decode a dataset split, scale to [0, 1] and normalize per channel.

    ``subset`` keeps a seeded uniform sample of that many examples (sorted by
    index), which is how the desk-scale CIFAR-10 default is drawn.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if name == "blobs":
        x, y = make_blobs(seed=0 if split == "train" else 1)
        ds = Dataset(x, y, split, 3, "blobs")
    else:
        loaders = {"mnist": _load_mnist, "cifar10": _load_cifar10, "cifar100": _load_cifar100}
        if name not in loaders:
            raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")
        raw, labels, files, k, mean, std = loaders[name](data_root(root), split)
        ds = Dataset(_normalize(raw, mean, std), labels, split, k, name, mean, std, [str(f) for f in files])
    if subset is not None and subset < len(ds):
        idx = np.sort(np.random.default_rng(subset_seed).choice(len(ds), subset, replace=False))
        ds = ds.subset(idx)
    return ds


def file_digest(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        h = hashlib.sha256()
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        out[os.path.basename(p)] = h.hexdigest()
    return out


def select_calibration(train: Dataset, n: int = 100, seed: int = 0) -> CalibrationSet:
    """Uniform sample without replacement; indices point into ``train``."""
    if n > len(train):
        raise ValueError(f"calibration size {n} exceeds training set size {len(train)}")
    if n < 1:
        raise ValueError("calibration set must be nonempty")
    idx = np.sort(np.random.default_rng(seed).choice(len(train), n, replace=False))
    return CalibrationSet(idx, train.images[idx], train.labels[idx], seed)


def _augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    n, _, h, w = x.shape
    flip = rng.random(n) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    return np.stack([padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w] for i in range(n)])


def batch_iter(ds: Dataset, batch_size: int, seed: int = 0, epoch: int = 0, *,
               shuffle: bool = True, augment: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(images, labels, indices)``; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ds)) if shuffle else np.arange(len(ds))
    aug_rng = np.random.default_rng([seed, epoch, 1])
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        x = ds.images[idx]
        if augment:
            x = _augment(x, aug_rng)
        yield x, ds.labels[idx], idx


def materialize_mnist_subset(dest, train_per_class: int = 400) -> Path:
    """Write the 5000-digit MNIST sample bundled with ``mlxtend`` as IDX files.

    The first ``train_per_class`` digits of every class become the train split
    and the rest the test split. The source file is sorted by label, so each
    split is written in a fixed shuffled order as the real MNIST files are.
    Returns ``dest``, usable as a data root.
    """
    dest = Path(dest)
    target = dest / "mnist"
    if (target / "t10k-labels-idx1-ubyte").exists():
        return dest
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise DataError("the bundled MNIST sample needs the 'mlxtend' package (pip install mlxtend)")
    csv = Path(next(iter(spec.submodule_search_locations))) / "data" / "data" / "mnist_5k.csv.gz"
    if not csv.exists():
        raise DataError(f"{csv} not found in the installed mlxtend")
    table = np.loadtxt(csv, delimiter=",", dtype=np.float64)
    pixels, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.int64)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.append(idx[:train_per_class])
        test_idx.append(idx[train_per_class:])
    order = np.random.default_rng(0)
    train_idx = order.permutation(np.concatenate(train_idx))
    test_idx = order.permutation(np.concatenate(test_idx))
    target.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", train_idx), ("t10k", test_idx)):
        write_idx(target / f"{prefix}-images-idx3-ubyte", images=pixels[idx].reshape(-1, 28, 28))
        write_idx(target / f"{prefix}-labels-idx1-ubyte", labels=labels[idx])
    return dest
