"""Datasets, Non-IID Dirichlet partitioning, and IDX file ingestion."""

import struct
from dataclasses import dataclass

import numpy as np

from .seeds import rng_for

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class PartitionInfeasibleError(DataError):
    """min_per_client could not be met within the retry budget."""


class IdxFormatError(DataError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(eq=False)
class LabeledDataset:
    """Row-major feature matrix with integer labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError("features must be 2-D (samples x dim)")
        if self.features.shape[0] == 0:
            raise DataError("dataset is empty")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels must align with feature rows")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or Inf")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass(eq=False)
class ClientShard:
    """One client's slice of a parent dataset plus its aggregation weight."""

    client_id: int
    indices: np.ndarray
    n_m: int
    p_m: float

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        if self.indices.size != self.n_m:
            raise DataError("shard index count disagrees with n_m")
        if np.unique(self.indices).size != self.indices.size:
            raise DataError("shard indices must be unique")


@dataclass(eq=False)
class PartitionManifest:
    """Result of a Dirichlet label partition: a disjoint cover of the dataset."""

    alpha: float
    seed: int
    min_per_client: int
    client_indices: list          # list of int64 arrays, one per client
    class_counts: np.ndarray      # (num_clients, num_classes)

    @property
    def num_clients(self):
        return len(self.client_indices)

    @property
    def num_samples(self):
        return int(sum(idx.size for idx in self.client_indices))

    def shards(self, dataset):
        """Materialize ClientShards with p_m = n_m / N."""
        self.validate_cover(dataset)
        total = self.num_samples
        return [
            ClientShard(m, idx, int(idx.size), idx.size / total)
            for m, idx in enumerate(self.client_indices)
        ]

    def validate_cover(self, dataset):
        merged = np.concatenate(self.client_indices) if self.client_indices else np.empty(0, np.int64)
        if not np.array_equal(np.sort(merged), np.arange(len(dataset))):
            raise DataError("manifest does not disjointly cover the dataset")

    def to_json_dict(self):
        return {
            "alpha": self.alpha,
            "seed": self.seed,
            "min_per_client": self.min_per_client,
            "client_indices": [idx.tolist() for idx in self.client_indices],
            "class_counts": self.class_counts.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc):
        return cls(
            alpha=float(doc["alpha"]),
            seed=int(doc["seed"]),
            min_per_client=int(doc["min_per_client"]),
            client_indices=[np.asarray(ix, dtype=np.int64) for ix in doc["client_indices"]],
            class_counts=np.asarray(doc["class_counts"], dtype=np.int64),
        )


def synth_dataset(num_classes, dim, per_class, mean_scale, seed):
    """Isotropic-Gaussian class blobs with seeded means of norm `mean_scale`.

    Samples are laid out class by class; unit-variance noise around each
    class mean, so `mean_scale` controls separability directly.
    """
    if num_classes < 2 or dim < 2 or per_class < 1:
        raise DataError("need num_classes >= 2, dim >= 2, per_class >= 1")
    rng = rng_for(seed)
    means = rng.standard_normal((num_classes, dim))
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    means = means / norms * mean_scale
    features = np.empty((num_classes * per_class, dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = means[c] + rng.standard_normal((per_class, dim))
        labels[block] = c
    return LabeledDataset(features, labels, num_classes)


def dirichlet_partition(dataset, num_clients, alpha, seed, min_per_client=2, max_retries=100):
    """Label-skewed partition: per class, Dirichlet(alpha) proportions over clients.

    Redraws the whole partition (bounded by `max_retries`) until every
    client holds at least `min_per_client` samples.
    """
    if num_clients < 2:
        raise DataError("need at least 2 clients")
    if alpha <= 0:
        raise DataError("alpha must be positive")
    rng = rng_for(seed)
    labels = dataset.labels
    for _ in range(max_retries + 1):
        assigned = [[] for _ in range(num_clients)]
        for c in range(dataset.num_classes):
            idx_c = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * idx_c.size).astype(np.int64)
            for m, part in enumerate(np.split(idx_c, cuts)):
                assigned[m].append(part)
        client_indices = [np.sort(np.concatenate(parts)) for parts in assigned]
        if min(idx.size for idx in client_indices) >= min_per_client:
            counts = np.zeros((num_clients, dataset.num_classes), dtype=np.int64)
            for m, idx in enumerate(client_indices):
                binc = np.bincount(labels[idx], minlength=dataset.num_classes)
                counts[m] = binc
            return PartitionManifest(float(alpha), int(seed), int(min_per_client),
                                     client_indices, counts)
    raise PartitionInfeasibleError(
        f"could not give every client {min_per_client} samples in {max_retries} retries"
    )


def _read_exact(fh, n, path, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{path}: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path):
    """Read an IDX image/label file pair into a flat float64 dataset.

    Pixels are scaled to [0, 1] (x/255) and flattened row-major; the class
    count is max(label) + 1.
    """
    with open(images_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, images_path, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise BadMagicError(f"{images_path}: magic {magic:#010x} != {IDX_IMAGES_MAGIC:#010x}")
        n, rows, cols = struct.unpack(">III", _read_exact(fh, 12, images_path, "dimensions"))
        payload = _read_exact(fh, n * rows * cols, images_path, "pixel data")
    with open(labels_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise BadMagicError(f"{labels_path}: magic {magic:#010x} != {IDX_LABELS_MAGIC:#010x}")
        (n_labels,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "count"))
        label_bytes = _read_exact(fh, n_labels, labels_path, "label data")
    if n != n_labels:
        raise CountMismatchError(f"{n} images vs {n_labels} labels")
    features = np.frombuffer(payload, dtype=np.uint8).astype(np.float64).reshape(n, rows * cols)
    features /= 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(features, labels, int(labels.max()) + 1)


def batches(shard, dataset, batch_size, seed, epoch):
    """Seeded per-epoch minibatch stream; the final short batch is kept.

    Order is a pure function of (seed, epoch, client_id).
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if shard.n_m == 0:
        raise DataError(f"client {shard.client_id} has no samples")
    order = rng_for(seed, shard.client_id, epoch).permutation(shard.indices)
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.features[idx], dataset.labels[idx]
