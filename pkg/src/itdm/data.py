"""Datasets: IDX (MNIST-family) files, synthetic Gaussian blobs, and the paired batch sampler."""

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from itdm.tensor import DTYPE

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "ITDM_DATA_DIR"

IDX_FILENAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxError(ValueError):
    """Base class for malformed IDX input."""


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.x.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.x.shape[0]} samples but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.x.shape[0]

    @property
    def sample_shape(self):
        return self.x.shape[1:]

    def subset(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[indices], self.labels[indices], self.num_classes, name or self.name)


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw, expected_magic, what):
    if len(raw) < 4:
        raise TruncatedFileError(f"{what}: file shorter than the 4-byte magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{what}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{what}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    body = raw[header:]
    if len(body) < count:
        raise TruncatedFileError(f"{what}: expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path, num_classes=10, name=""):
    """Load an IDX image/label pair, scaling pixels to [0, 1]. ``.gz`` paths are decompressed."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, "images")
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= num_classes:
        raise IdxError(f"label {labels.max()} out of range for {num_classes} classes")
    return Dataset(images.astype(DTYPE) / 255.0, labels.astype(np.int64), num_classes, name)


def idx_bytes(array, magic):
    array = np.asarray(array)
    ndim = magic & 0xFF
    if array.ndim != ndim:
        raise ValueError(f"magic 0x{magic:08x} needs a {ndim}-D array, got {array.ndim}-D")
    return struct.pack(f">I{ndim}I", magic, *array.shape) + array.astype(np.uint8).tobytes()


def write_idx(dataset, images_path, labels_path):
    """Inverse of :func:`load_idx` for 3-D image datasets (pixels re-quantized to bytes)."""
    if dataset.x.ndim != 3:
        raise ValueError("IDX image files hold (n, rows, cols) arrays")
    pixels = np.rint(dataset.x * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise ValueError("pixel values must lie in [0, 1]")
    Path(images_path).write_bytes(idx_bytes(pixels, IMAGES_MAGIC))
    Path(labels_path).write_bytes(idx_bytes(dataset.labels, LABELS_MAGIC))


def find_idx_files(dataset_name, data_dir=None):
    """Locate the four standard IDX files under ``data_dir`` (or ``$ITDM_DATA_DIR``).

    Looks in ``<dir>/<dataset_name>/`` and then ``<dir>/``; accepts plain or ``.gz``.
    """
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        return None
    for root in (Path(data_dir) / dataset_name, Path(data_dir)):
        found = {}
        for key, stem in IDX_FILENAMES.items():
            for candidate in (root / stem, root / f"{stem}.gz"):
                if candidate.exists():
                    found[key] = candidate
                    break
        if len(found) == len(IDX_FILENAMES):
            return found
    return None


def synthetic_blobs(num_classes, per_class, dim, separation, rng, name="blobs"):
    """Isotropic unit-variance Gaussian classes with means ``separation`` apart.

    Class ``k`` is centred at ``(separation / sqrt 2) * e_k``, so every pair of
    means is exactly ``separation`` apart. Requires ``dim >= num_classes``.
    """
    if num_classes < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 sample per class")
    if dim < num_classes:
        raise ValueError(f"dim ({dim}) must be at least num_classes ({num_classes})")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    means = np.zeros((num_classes, dim))
    means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = means[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], num_classes, name)


class DualBatchSampler:
    """Yields index pairs ``(s1, s2)``: ``s1`` walks an epoch permutation, ``s2`` an independent stream.

    ``s2`` comes from its own shuffled stream that is reshuffled whenever it runs
    out, so it is always the same length as ``s1`` and may overlap it.
    """

    def __init__(self, n, batch_size, rng):
        if n < 1 or batch_size < 1:
            raise ValueError("n and batch_size must be positive")
        self.n = n
        self.batch_size = batch_size
        self.rng1, self.rng2 = rng.spawn(2)
        self._perm1 = None
        self._pos1 = 0
        self._perm2 = self.rng2.permutation(n)
        self._pos2 = 0

    def start_epoch(self):
        self._perm1 = self.rng1.permutation(self.n)
        self._pos1 = 0

    def _take2(self, size):
        out = []
        while size > 0:
            if self._pos2 >= self.n:
                self._perm2 = self.rng2.permutation(self.n)
                self._pos2 = 0
            chunk = self._perm2[self._pos2:self._pos2 + size]
            self._pos2 += chunk.size
            size -= chunk.size
            out.append(chunk)
        return np.concatenate(out)

    def next_pair(self):
        """Next ``(s1, s2)`` index arrays; raises ``StopIteration`` at the end of the epoch."""
        if self._perm1 is None or self._pos1 >= self.n:
            raise StopIteration
        s1 = self._perm1[self._pos1:self._pos1 + self.batch_size]
        self._pos1 += s1.size
        return s1, self._take2(s1.size)

    def epoch(self):
        self.start_epoch()
        while True:
            try:
                yield self.next_pair()
            except StopIteration:
                return

    @property
    def epoch_done(self):
        return self._perm1 is not None and self._pos1 >= self.n

    def steps_per_epoch(self):
        return -(-self.n // self.batch_size)
