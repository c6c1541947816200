"""Datasets, nested prefix chains and train/calibration splits."""
from __future__ import annotations

import csv
import gzip
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled examples; ``x`` is always (n, features), ``ids`` the original row ids."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = "dataset"
    provenance: str = ""
    ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim > 2:
            x = x.reshape(x.shape[0], math.prod(x.shape[1:]))
        y = np.asarray(self.y, dtype=np.int64)
        if x.shape[0] != y.shape[0]:
            raise DataError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        ids = np.arange(y.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.name, self.provenance, self.ids[idx])

    def input_digest(self) -> str:
        """Hash of the inputs only; labels are what the codec transmits."""
        h = hashlib.sha256()
        h.update(struct.pack("<qqq", *self.x.shape, self.num_classes))
        h.update(np.ascontiguousarray(self.x).tobytes())
        return h.hexdigest()


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header < count:
        raise DataError(f"{path}: truncated payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    """Read an MNIST-style IDX image/label pair (optionally gzip-wrapped)."""
    images = _parse_idx(_read_maybe_gzip(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    k = num_classes if num_classes is not None else max(2, int(labels.max()) + 1)
    return Dataset(x, labels.astype(np.int64), k, name or Path(images_path).name, f"idx:{images_path}")


def write_idx(path, array: np.ndarray, magic: int, compress: bool = False) -> None:
    array = np.asarray(array, dtype=np.uint8)
    blob = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    Path(path).write_bytes(gzip.compress(blob, mtime=0) if compress else blob)


def load_csv(path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    """CSV with header ``label,f0,f1,...``; features min-max scaled to [0, 1]."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise DataError(f"{path}: first column must be 'label'")
        rows = [r for r in reader if r]
    if not rows:
        raise DataError(f"{path}: no rows")
    y = np.array([int(r[0]) for r in rows], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    k = num_classes if num_classes is not None else max(2, int(y.max()) + 1)
    return Dataset(x, y, k, name or Path(path).stem, f"csv:{path}")


def synth_mixture(num_classes: int, dim: int, examples_per_class: int, separation: float, seed: int,
                  clusters_per_class: int = 1, scale: float = 1.0, max_tries: int = 1000) -> Dataset:
    """Balanced Gaussian mixture with unit-variance clusters.

    Cluster centers are drawn uniformly in a cube sized so that pairwise
    distances of at least ``separation`` are attainable, by rejection.
    Examples are returned in a seeded random order.
    """
    if min(num_classes, dim, examples_per_class, clusters_per_class) < 1 or num_classes < 2:
        raise DataError("counts must be positive and num_classes >= 2")
    if separation < 0:
        raise DataError("separation must be non-negative")
    n_centers = num_classes * clusters_per_class
    half = 0.5 * separation * max(1.0, 2.0 * n_centers ** (1.0 / dim))
    stream = Stream(seed, "synth", "centers")
    centers: list[np.ndarray] = []
    for _ in range(n_centers):
        for _ in range(max_tries):
            c = (2.0 * stream.uniform(dim) - 1.0) * half
            if all(np.linalg.norm(c - o) >= separation for o in centers):
                centers.append(c)
                break
        else:
            raise DataError(f"could not place {n_centers} centers {separation} apart")
    noise = Stream(seed, "synth", "noise")
    n = num_classes * examples_per_class
    labels = np.repeat(np.arange(num_classes), examples_per_class)
    sub = np.tile(np.arange(examples_per_class) % clusters_per_class, num_classes)
    cidx = labels * clusters_per_class + sub
    x = np.stack(centers)[cidx] + scale * noise.normal(n * dim).reshape(n, dim)
    order = Stream(seed, "synth", "order").permutation(n)
    tag = f"synth:k={num_classes},d={dim},m={examples_per_class},sep={separation},c={clusters_per_class},seed={seed}"
    return Dataset(x[order], labels[order], num_classes, "synth", tag)


def holdout(dataset: Dataset, n_eval: int, seed: int) -> tuple[Dataset, Dataset]:
    """Split off a seeded evaluation set of ``n_eval`` examples."""
    if not 0 < n_eval < len(dataset):
        raise DataError("evaluation size out of range")
    perm = Stream(seed, "holdout").permutation(len(dataset))
    return dataset.take(np.sort(perm[n_eval:])), dataset.take(np.sort(perm[:n_eval]))


@dataclass(frozen=True, eq=False)
class PrefixChain:
    """Nested subsets: ``subset(n)`` is the first ``n`` entries of one permutation."""

    permutation: np.ndarray
    sizes: tuple

    def subset_indices(self, n: int) -> np.ndarray:
        if n not in self.sizes and n != len(self.permutation):
            raise DataError(f"{n} is not a size of this chain")
        return self.permutation[:n]

    def added_indices(self, i: int) -> np.ndarray:
        """Examples added between sizes[i-1] (0 for i=0) and sizes[i]."""
        lo = 0 if i == 0 else self.sizes[i - 1]
        return self.permutation[lo:self.sizes[i]]


def make_prefix_chain(dataset: Dataset, sizes, seed: int) -> PrefixChain:
    sizes = tuple(int(s) for s in sizes)
    if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise DataError(f"sizes must be strictly increasing, got {sizes}")
    if sizes[0] < 1 or sizes[-1] > len(dataset):
        raise DataError(f"sizes must lie in [1, {len(dataset)}]")
    perm = Stream(seed, "prefix").permutation(len(dataset))
    return PrefixChain(perm, sizes)


@dataclass(frozen=True)
class SplitSpec:
    calib_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.calib_fraction < 1.0:
            raise DataError("calib_fraction must lie in (0, 1)")


def calib_size(n: int, fraction: float) -> int:
    return min(n - 1, max(1, math.floor(fraction * n + 0.5)))


def split_train_calib(subset: Dataset, split: SplitSpec) -> tuple[Dataset, Dataset]:
    """Disjoint train/calibration split; the stream is keyed on (seed, subset size)."""
    n = len(subset)
    if n < 2:
        raise DataError("need at least 2 examples to split")
    c = calib_size(n, split.calib_fraction)
    perm = Stream(split.seed, "split", n).permutation(n)
    return subset.take(np.sort(perm[c:])), subset.take(np.sort(perm[:c]))
