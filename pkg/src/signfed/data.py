"""Datasets, client partitioning and backdoor relabeling."""

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from signfed.errors import ConfigError, FormatError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    num_classes: int = field(default=0)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ConfigError("features row count must equal labels length")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels must lie in [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, name=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], name or self.name, self.num_classes)


@dataclass
class Partition:
    client_indices: list

    @property
    def num_clients(self):
        return len(self.client_indices)

    def sizes(self):
        return [len(ix) for ix in self.client_indices]


# --- MNIST IDX -------------------------------------------------------------

def _open(path):
    if os.path.exists(path):
        return open(path, "rb")
    if os.path.exists(path + ".gz"):
        return gzip.open(path + ".gz", "rb")
    raise FileNotFoundError(path)


def read_idx(path, expected_magic):
    """Read one IDX file into a uint8 array.

    Raises:
        FormatError: wrong magic number or fewer bytes than the header declares.
    """
    with _open(path) as fh:
        raw = fh.read()
    name = os.path.basename(path)
    if len(raw) < 8:
        raise FormatError(f"{name}: truncated header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{name}: bad magic number {magic}, expected {expected_magic}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{name}: truncated header")
    dims = struct.unpack(">" + "i" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise FormatError(f"{name}: truncated file, {len(raw) - header} of {count} data bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as IDX (1-D arrays as labels, 3-D as images)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">i", magic))
        fh.write(struct.pack(">" + "i" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def load_mnist(path):
    """Load the four standard MNIST files from directory ``path``.

    Returns ``(train, test)`` with pixels flattened to 784 columns and scaled to
    [0, 1]. Files may be plain or ``.gz``.
    """
    parts = {}
    for key, fname in MNIST_FILES.items():
        magic = IMAGE_MAGIC if key.endswith("images") else LABEL_MAGIC
        parts[key] = read_idx(os.path.join(path, fname), magic)
    out = []
    for split in ("train", "test"):
        images, labels = parts[f"{split}_images"], parts[f"{split}_labels"]
        if images.shape[0] != labels.shape[0]:
            raise FormatError(f"{MNIST_FILES[split + '_images']}: {images.shape[0]} images "
                              f"but {labels.shape[0]} labels")
        x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
        out.append(Dataset(x, labels.astype(np.int64), f"mnist-{split}", 10))
    return tuple(out)


# --- synthetic -------------------------------------------------------------

def make_synthetic(num_classes, dim, per_class, separation, seed):
    """Unit-covariance Gaussian blobs, class ``c`` centred at ``separation * e_c``.

    Rows are shuffled so that contiguous slices mix classes.
    """
    if per_class < 1:
        raise ConfigError("must be >= 1", field="data.per_class")
    if dim < num_classes:
        raise ConfigError("dim must be >= num_classes for axis-aligned centres", field="data.dim")
    rng = np.random.default_rng(seed)
    centres = separation * np.eye(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = centres[labels] + rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(x[order], labels[order], "synthetic", num_classes)


def train_test_split(dataset, test_fraction, seed):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    return (dataset.subset(np.sort(order[n_test:]), dataset.name + "-train"),
            dataset.subset(np.sort(order[:n_test]), dataset.name + "-test"))


# --- partitioning ----------------------------------------------------------

def partition(dataset, N, per_client, mode, seed):
    """Deal ``per_client`` samples to each of ``N`` clients.

    ``iid`` draws uniformly without replacement. ``label-sorted-shards`` sorts a
    random subset of ``N * per_client`` samples by label, cuts it into ``2N``
    contiguous shards and hands each client two of them.
    """
    if N < 1 or per_client < 1:
        raise ConfigError("client count and shard size must be >= 1")
    total = N * per_client
    if total > len(dataset):
        raise ConfigError(f"need {total} samples for {N} clients x {per_client}, "
                          f"dataset has {len(dataset)}", field="partition.per_client")
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(len(dataset))[:total]
    if mode == "iid":
        return Partition([np.sort(chosen[k * per_client:(k + 1) * per_client]) for k in range(N)])
    if mode != "label-sorted-shards":
        raise ConfigError(f"unknown partition mode {mode!r}", field="partition.mode")
    if per_client % 2:
        raise ConfigError("must be even for label-sorted-shards", field="partition.per_client")
    ordered = chosen[np.argsort(dataset.labels[chosen], kind="stable")]
    half = per_client // 2
    shards = [ordered[s * half:(s + 1) * half] for s in range(2 * N)]
    deal = rng.permutation(2 * N)
    return Partition([np.sort(np.concatenate([shards[deal[2 * k]], shards[deal[2 * k + 1]]]))
                      for k in range(N)])


# --- backdoors -------------------------------------------------------------

def relabel_in_backdoor(shard, source_class, target_class):
    """Copy of ``shard`` where every ``source_class`` sample is labelled ``target_class``."""
    if source_class == target_class:
        raise ConfigError("source and target class must differ", field="adversary.target_class")
    for c, name in ((source_class, "source_class"), (target_class, "target_class")):
        if not 0 <= c < shard.num_classes:
            raise ConfigError("not a valid class", field=f"adversary.{name}")
    labels = shard.labels.copy()
    labels[labels == source_class] = target_class
    return Dataset(shard.features, labels, shard.name + "-inbd", shard.num_classes)


def build_out_backdoor(dataset, part, excluded_class, target_class, malicious_clients):
    """Build per-client shards for an out-of-distribution backdoor.

    Honest clients lose every ``excluded_class`` sample. Malicious clients keep
    their own remaining samples and additionally split all ``excluded_class``
    samples of ``dataset`` evenly among themselves, relabelled ``target_class``.

    Returns:
        (shards, dropped) where ``shards[k]`` is client ``k``'s dataset and
        ``dropped`` counts samples of ``dataset`` assigned to no client.
    """
    if not np.any(dataset.labels == excluded_class):
        raise ConfigError("excluded class absent from dataset", field="adversary.source_class")
    if excluded_class == target_class:
        raise ConfigError("excluded and target class must differ", field="adversary.target_class")
    malicious = sorted(set(int(k) for k in malicious_clients))
    excluded_idx = np.flatnonzero(dataset.labels == excluded_class)
    pools = np.array_split(excluded_idx, len(malicious)) if malicious else []
    pool_of = dict(zip(malicious, pools))

    shards, used = [], 0
    for k, idx in enumerate(part.client_indices):
        keep = idx[dataset.labels[idx] != excluded_class]
        base = dataset.subset(keep)
        if k in pool_of:
            extra = dataset.subset(pool_of[k])
            labels = np.concatenate([base.labels, np.full(len(extra), target_class)])
            base = Dataset(np.vstack([base.features, extra.features]), labels,
                           dataset.name + "-outbd", dataset.num_classes)
        shards.append(base)
        used += len(base)
    return shards, len(dataset) - used
