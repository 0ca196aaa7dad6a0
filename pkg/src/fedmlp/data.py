"""Datasets, long-tail subsampling, non-iid partitioners and per-client task streams.

Everything here is a pure function of its inputs and an integer seed. Arrays are
float64 features of shape (n, d_in) and int64 labels of shape (n,).
"""
from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    """Base class for IDX parse failures."""


class IdxMagicError(IdxFormatError):
    pass


class IdxLengthMismatchError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if features.shape[1] < 1:
            raise ValueError("feature dimension must be positive")
        if labels.shape != (features.shape[0],):
            raise ValueError("features and labels must have equal length")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError("labels must lie in 0..class_count-1")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def label_set(self) -> frozenset:
        return frozenset(int(c) for c in np.unique(self.labels))

    @staticmethod
    def concat(parts: Sequence["LabeledDataset"], class_count: int, dim: int) -> "LabeledDataset":
        if not parts:
            return LabeledDataset(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), class_count)
        return LabeledDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            class_count,
        )


@dataclass(frozen=True)
class TaskStream:
    client_id: int
    tasks: List[LabeledDataset]
    tests: List[LabeledDataset]
    cumulative_tests: List[LabeledDataset]
    seen_classes: List[frozenset] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True)
class PartitionSpec:
    strategy: str = "sharding"
    s: int = 4
    beta: float = 1.0
    gamma: float = 0.5
    num_clients: int = 20
    tasks_per_client: int = 5
    seed: int = 0

    def validate(self) -> List[str]:
        errors = []
        if self.strategy not in ("sharding", "dirichlet"):
            errors.append(f"strategy: unknown partitioner {self.strategy!r}")
        if self.s < 1:
            errors.append("s: shards per task must be >= 1")
        if not self.beta > 0:
            errors.append("beta: Dirichlet concentration must be > 0")
        if not 0 < self.gamma <= 1:
            errors.append("gamma: imbalance rate must lie in (0, 1]")
        if self.num_clients < 1:
            errors.append("num_clients: must be >= 1")
        if self.tasks_per_client < 1:
            errors.append("tasks_per_client: must be >= 1")
        return errors


def synth_blobs(num_classes: int, d_in: int, per_class: int, spread: float, seed: int) -> LabeledDataset:
    """Isotropic Gaussian blobs, one per class, with means drawn from N(0, I)."""
    if num_classes < 2 or d_in < 1 or per_class < 1 or not spread > 0:
        raise ValueError("synth_blobs needs num_classes >= 2, d_in >= 1, per_class >= 1, spread > 0")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, d_in))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    features = means[labels] + spread * rng.standard_normal((labels.size, d_in))
    return LabeledDataset(features, labels, num_classes)


def _open_maybe_gzip(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic: int) -> tuple:
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_len])
    expected = int(np.prod(dims, dtype=np.int64))
    body = raw[header_len:]
    if len(body) < expected:
        raise IdxTruncatedError(f"{path}: expected {expected} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=np.uint8, count=expected).reshape(dims)
    return dims, data


def load_idx(images_path, labels_path, class_count: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair (MNIST layout); pixels scaled to [0, 1]."""
    img_dims, images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    lab_dims, labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if img_dims[0] != lab_dims[0]:
        raise IdxLengthMismatchError(f"{img_dims[0]} images but {lab_dims[0]} labels")
    features = images.reshape(img_dims[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(features, labels, class_count)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_csv(path, class_count: int | None = None) -> LabeledDataset:
    """CSV with a header row; the ``label`` column holds class ids, every other column a feature."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "label" not in header:
            raise ValueError(f"{path}: no 'label' column in header")
        li = header.index("label")
        rows = [r for r in reader if r]
    labels = np.array([int(r[li]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for j, v in enumerate(r) if j != li] for r in rows], dtype=np.float64)
    feats = feats.reshape(len(rows), len(header) - 1)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(feats, labels, class_count)


def longtail_counts(counts_desc: Sequence[int], gamma: float) -> List[int]:
    """Exponential profile n_i = round(n_max * gamma**(i/(K-1))), capped by availability."""
    k = len(counts_desc)
    n_max = counts_desc[0]
    if k == 1:
        return [n_max]
    return [min(int(c), int(math.floor(n_max * gamma ** (i / (k - 1)) + 0.5))) for i, c in enumerate(counts_desc)]


def apply_longtail(dataset: LabeledDataset, gamma: float, seed: int) -> LabeledDataset:
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    counts = dataset.class_counts()
    present = [c for c in range(dataset.class_count) if counts[c] > 0]
    order = sorted(present, key=lambda c: (-counts[c], c))
    if len(order) == 1:
        return dataset
    keep_n = longtail_counts([int(counts[c]) for c in order], gamma)
    rng = np.random.default_rng(seed)
    keep = []
    for c, n in zip(order, keep_n):
        idx = np.flatnonzero(dataset.labels == c)
        keep.append(np.sort(rng.choice(idx, size=n, replace=False)))
    return dataset.subset(np.sort(np.concatenate(keep)))


def partition_sharding(dataset: LabeledDataset, num_partitions: int, s: int, seed: int) -> List[LabeledDataset]:
    """Label-sorted equal shards, ``s`` per partition, assigned by a seeded permutation.

    Samples past ``num_shards * shard_size`` in label-sorted order are dropped.
    """
    if num_partitions < 1 or s < 1:
        raise ValueError("num_partitions and s must be >= 1")
    num_shards = num_partitions * s
    shard_size = len(dataset) // num_shards
    if shard_size < 1:
        raise ValueError(f"{len(dataset)} samples cannot fill {num_shards} shards")
    order = np.argsort(dataset.labels, kind="stable")[: num_shards * shard_size]
    shards = order.reshape(num_shards, shard_size)
    perm = np.random.default_rng(seed).permutation(num_shards)
    return [dataset.subset(shards[perm[p * s:(p + 1) * s]].ravel()) for p in range(num_partitions)]


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` by ``proportions``; ties go to the lower index."""
    quotas = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        frac = quotas - counts
        winners = sorted(range(len(frac)), key=lambda i: (-frac[i], i))[:short]
        counts[winners] += 1
    return counts


def dirichlet_proportions(num_classes: int, num_partitions: int, beta: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.full(num_partitions, float(beta)), size=num_classes)


def partition_dirichlet(dataset: LabeledDataset, num_partitions: int, beta: float, seed: int) -> List[LabeledDataset]:
    """Per class, split samples over partitions by a Dir(beta) draw. Partitions may be empty."""
    if num_partitions < 1:
        raise ValueError("num_partitions must be >= 1")
    if not beta > 0:
        raise ValueError("beta must be > 0")
    props = dirichlet_proportions(dataset.class_count, num_partitions, beta, seed)
    shuffle_rng = np.random.default_rng([seed, 1])
    buckets: List[list] = [[] for _ in range(num_partitions)]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = shuffle_rng.permutation(idx)
        counts = largest_remainder(props[c], idx.size)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for p in range(num_partitions):
            buckets[p].append(idx[bounds[p]:bounds[p + 1]])
    return [dataset.subset(np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64)) for b in buckets]


def stratified_split(dataset: LabeledDataset, test_fraction: float, rng: np.random.Generator):
    """Per-class train/test split; every class present keeps at least one training sample."""
    train_idx, test_idx = [], []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        n_test = min(idx.size - 1, int(math.floor(test_fraction * idx.size + 0.5)))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    empty = np.zeros(0, dtype=np.int64)
    train = np.sort(np.concatenate(train_idx)) if train_idx else empty
    test = np.sort(np.concatenate(test_idx)) if test_idx else empty
    return dataset.subset(train), dataset.subset(test)


def build_task_streams(partitions: Sequence[LabeledDataset], num_clients: int, tasks_per_client: int,
                       test_fraction: float, seed: int) -> List[TaskStream]:
    """Deal partitions round-robin: partition j becomes task j // M of client j % M."""
    if len(partitions) != num_clients * tasks_per_client:
        raise ValueError(f"need {num_clients * tasks_per_client} partitions, got {len(partitions)}")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    class_count = partitions[0].class_count
    dim = partitions[0].dim
    streams = []
    for m in range(num_clients):
        tasks, tests, cumulative, seen = [], [], [], []
        acc_classes: frozenset = frozenset()
        for t in range(tasks_per_client):
            part = partitions[t * num_clients + m]
            rng = np.random.default_rng([seed, m, t])
            train, test = stratified_split(part, test_fraction, rng)
            tasks.append(train)
            tests.append(test)
            cumulative.append(LabeledDataset.concat(tests, class_count, dim))
            acc_classes = acc_classes | train.label_set()
            seen.append(acc_classes)
        streams.append(TaskStream(m, tasks, tests, cumulative, seen))
    return streams


def balanced_test_set(streams: Sequence[TaskStream], seed: int) -> LabeledDataset:
    """Equal per-class sample of the union of all test shards (size = smallest nonzero class count)."""
    first = streams[0].tests[0]
    pool = LabeledDataset.concat([t for s in streams for t in s.tests], first.class_count, first.dim)
    counts = pool.class_counts()
    present = [c for c in range(pool.class_count) if counts[c] > 0]
    if not present:
        return pool
    n = int(min(counts[c] for c in present))
    rng = np.random.default_rng([seed, 0xBA1])
    keep = [np.sort(rng.choice(np.flatnonzero(pool.labels == c), size=n, replace=False)) for c in present]
    return pool.subset(np.concatenate(keep))
