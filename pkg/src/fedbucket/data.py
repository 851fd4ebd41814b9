"""Datasets, IDX ingestion and client partitioning."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, PartitionInfeasibleError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DIRICHLET_RETRIES = 100


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float32)
        y = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise InputError(f"features {x.shape} and labels {y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise InputError("label out of range")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True, eq=False)
class Partition:
    assignments: tuple[np.ndarray, ...]
    alpha: float | None
    seed: int

    @property
    def clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [a.size for a in self.assignments]


def make_synthetic(classes: int, per_class: int, feature_dim: int, spread: float, seed: int,
                   separation: float = 1.0) -> Dataset:
    """Gaussian blobs centred on the scaled simplex ``separation * e_c``.

    Class means do not depend on ``seed``, so datasets drawn with different
    seeds come from the same distribution (use one as a test set).
    """
    if classes < 2 or per_class < 1:
        raise InputError("need classes >= 2 and per_class >= 1")
    if feature_dim < classes:
        raise InputError("feature_dim must be >= classes")
    if spread < 0:
        raise InputError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    means = np.zeros((classes, feature_dim))
    means[np.arange(classes), np.arange(classes)] = separation
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, feature_dim))
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], classes)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    try:
        with _open(path) as fh:
            raw = fh.read()
    except (gzip.BadGzipFile, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    (got,) = struct.unpack_from(">I", raw)
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = int(np.prod(dims, dtype=np.int64))
    body = raw[header:]
    if len(body) != expected:
        raise FormatError(f"{path}: body has {len(body)} bytes, header implies {expected}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= class_count:
        raise FormatError(f"label {labels.max()} outside [0, {class_count})")
    x = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    return Dataset(x, labels.astype(np.int64), class_count)


def partition_iid(dataset: Dataset, clients: int, seed: int) -> Partition:
    n = len(dataset)
    if clients < 1:
        raise InputError("clients must be >= 1")
    if n < clients:
        raise InputError(f"{n} samples cannot cover {clients} clients")
    perm = np.random.default_rng(seed).permutation(n)
    return Partition(tuple(np.sort(s) for s in np.array_split(perm, clients)), None, seed)


def partition_dirichlet(dataset: Dataset, clients: int, alpha: float, seed: int) -> Partition:
    """Per-class client proportions drawn from ``Dirichlet(alpha * 1_N)``.

    A draw that leaves any client empty is discarded and redrawn.
    """
    n = len(dataset)
    if not alpha > 0:
        raise InputError("alpha must be > 0")
    if clients < 1:
        raise InputError("clients must be >= 1")
    if n < clients:
        raise InputError(f"{n} samples cannot cover {clients} clients")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.class_count)]
    for attempt in range(DIRICHLET_RETRIES):
        shards: list[list[np.ndarray]] = [[] for _ in range(clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            p = rng.dirichlet(np.full(clients, float(alpha)))
            cuts = (np.cumsum(p)[:-1] * idx.size).astype(np.int64)
            for k, part in enumerate(np.split(idx, cuts)):
                shards[k].append(part)
        out = tuple(np.sort(np.concatenate(s)) if s else np.zeros(0, np.int64) for s in shards)
        if all(a.size > 0 for a in out):
            if attempt:
                log.debug("dirichlet partition needed %d redraws", attempt)
            return Partition(out, float(alpha), seed)
    raise PartitionInfeasibleError(
        f"no draw in {DIRICHLET_RETRIES} attempts gave every one of {clients} clients a sample")


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted index sets of a disjoint random split; the first has ``floor(fraction * n)``."""
    if not 0 < fraction < 1:
        raise InputError("fraction must be in (0, 1)")
    k = int(np.floor(fraction * n))
    if k == 0 or k == n:
        raise InputError(f"fraction {fraction} of {n} samples leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])


def split_pretrain(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split off a pre-training set; returns ``(pretrain, federated)``."""
    first, second = split_indices(len(dataset), fraction, seed)
    return dataset.subset(first), dataset.subset(second)


def label_entropy(labels, class_count: int) -> float:
    """Shannon entropy (nats) of a label multiset."""
    counts = np.bincount(np.asarray(labels), minlength=class_count).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
