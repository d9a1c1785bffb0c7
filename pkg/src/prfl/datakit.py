"""Datasets, non-IID client partitions and per-client splits."""
from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    DatasetChecksumError,
    DatasetMagicError,
    DatasetSizeError,
    DatasetValidationError,
    DatasetVersionError,
)

log = logging.getLogger(__name__)

PRDS_MAGIC = b"PRDS"
PRDS_VERSION = 1
SPLIT_RATIOS = (0.8, 0.1, 0.1)


@dataclass
class Dataset:
    features: np.ndarray  # (n, *dims)
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim < 2:
            raise DatasetValidationError("features need a sample axis and at least one feature axis")
        if len(self.labels) != len(self.features) or len(self.labels) < 1:
            raise DatasetValidationError("need n >= 1 samples with one label each")
        if self.num_classes < 1:
            raise DatasetValidationError("num_classes must be >= 1")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetValidationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_dims(self) -> tuple:
        return tuple(self.features.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def equals(self, other: "Dataset") -> bool:
        return (self.num_classes == other.num_classes
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


@dataclass
class PartitionSpec:
    assignment: list[np.ndarray]
    splits: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.assignment)


def gen_synthetic(num_classes: int, dims, n_per_class: int, spread: float,
                  rng: np.random.Generator, separation: float = 1.0) -> Dataset:
    """Gaussian blobs around random class anchors.

    Anchors are standard normal scaled by ``separation``; samples add
    isotropic noise with standard deviation ``spread``. Smaller separation
    gives a harder, more fine-grained problem.
    """
    if num_classes < 2 or n_per_class < 1:
        raise ConfigurationError("need num_classes >= 2 and n_per_class >= 1")
    dims = (int(dims),) if np.isscalar(dims) else tuple(int(d) for d in dims)
    anchors = separation * rng.standard_normal((num_classes, *dims))
    labels = np.repeat(np.arange(num_classes), n_per_class)
    noise = rng.standard_normal((len(labels), *dims))
    feats = anchors[labels] + spread * noise
    # Rounded to float32 so PRDS files round-trip exactly.
    return Dataset(feats.astype(np.float32).astype(np.float64), labels, num_classes)


def largest_remainder(total: int, weights) -> np.ndarray:
    """Integer counts summing to ``total`` in proportion to ``weights``.

    Ties in the fractional remainder go to the earlier index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total == 0:
        return np.zeros(len(w), dtype=np.int64)
    s = w.sum()
    if s <= 0:
        w = np.ones_like(w)
        s = w.sum()
    quota = total * w / s
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(quota - base), kind="stable")
        base[order[:short]] += 1
    return base


def split_client(indices, rng: np.random.Generator):
    """Shuffle and cut into 80/10/10 train/val/test index arrays."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(idx) < 3:
        log.warning("client with %d samples: everything goes to train", len(idx))
        return idx.copy(), idx[:0].copy(), idx[:0].copy()
    idx = rng.permutation(idx)
    n_tr, n_va, _ = largest_remainder(len(idx), SPLIT_RATIOS)
    return idx[:n_tr], idx[n_tr:n_tr + n_va], idx[n_tr + n_va:]


def _with_splits(assignment, rng) -> PartitionSpec:
    assignment = [np.sort(np.asarray(a, dtype=np.int64)) for a in assignment]
    return PartitionSpec(assignment, [split_client(a, rng) for a in assignment])


def partition_pathological(ds: Dataset, num_clients: int, rng: np.random.Generator,
                           classes_per_client: int = 2) -> PartitionSpec:
    """Sort by label, cut into ``num_clients * classes_per_client`` shards, deal at random."""
    n_shards = num_clients * classes_per_client
    if num_clients < 1 or classes_per_client < 1:
        raise ConfigurationError("num_clients and classes_per_client must be >= 1")
    if len(ds) < n_shards:
        raise ConfigurationError(f"{len(ds)} samples cannot fill {n_shards} shards")
    order = np.argsort(ds.labels, kind="stable")
    shards = np.array_split(order, n_shards)
    deal = rng.permutation(n_shards)
    assignment = [
        np.concatenate([shards[s] for s in deal[k * classes_per_client:(k + 1) * classes_per_client]])
        for k in range(num_clients)
    ]
    return _with_splits(assignment, rng)


def partition_dirichlet(ds: Dataset, num_clients: int, lam: float, rng: np.random.Generator,
                        prior=None) -> PartitionSpec:
    """Each client draws ``q ~ Dirichlet(lam * prior)``; classes are shared out by q-mass.

    Smaller ``lam`` gives more skewed clients. ``prior`` defaults to the
    empirical class frequencies.
    """
    if lam <= 0:
        raise ConfigurationError("Dirichlet concentration must be > 0", key="lambda")
    if num_clients < 1:
        raise ConfigurationError("num_clients must be >= 1")
    counts = ds.class_counts()
    p = counts / counts.sum() if prior is None else np.asarray(prior, dtype=np.float64)
    if len(p) != ds.num_classes or np.any(p < 0) or p.sum() <= 0:
        raise ConfigurationError("prior must be a distribution over the classes")
    p = p / p.sum()
    conc = np.maximum(lam * p, 1e-300)
    q = np.stack([_dirichlet(rng, conc) for _ in range(num_clients)])  # clients x classes
    buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(ds.num_classes):
        members = rng.permutation(np.nonzero(ds.labels == c)[0])
        if len(members) == 0:
            continue
        sizes = largest_remainder(len(members), q[:, c])
        start = 0
        for k, size in enumerate(sizes):
            buckets[k].append(members[start:start + size])
            start += size
    assignment = [np.concatenate(b) if b else np.zeros(0, dtype=np.int64) for b in buckets]
    for k in range(num_clients):
        if len(assignment[k]) == 0:
            donor = int(np.argmax([len(a) for a in assignment]))
            if len(assignment[donor]) < 2:
                break
            assignment[k] = assignment[donor][-1:]
            assignment[donor] = assignment[donor][:-1]
    return _with_splits(assignment, rng)


def _dirichlet(rng: np.random.Generator, conc: np.ndarray) -> np.ndarray:
    # numpy's sampler returns NaN for very small concentrations; fall back to
    # normalised gamma draws, and to a one-hot draw if every gamma underflows.
    q = rng.dirichlet(conc)
    if np.all(np.isfinite(q)):
        return q
    g = rng.gamma(conc)
    if g.sum() > 0:
        return g / g.sum()
    out = np.zeros_like(conc)
    out[rng.choice(len(conc), p=conc / conc.sum())] = 1.0
    return out


def client_skew(ds: Dataset, part: PartitionSpec) -> float:
    """Mean over non-empty clients of the largest single-class share."""
    shares = []
    for a in part.assignment:
        if len(a):
            shares.append(np.bincount(ds.labels[a], minlength=ds.num_classes).max() / len(a))
    return float(np.mean(shares))


# --- PRDS file format ---------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    dims = ds.sample_dims
    if ds.num_classes > 65536:
        raise DatasetValidationError("PRDS stores labels as u16")
    head = struct.pack("<4sHIB", PRDS_MAGIC, PRDS_VERSION, len(ds), len(dims))
    head += struct.pack(f"<{len(dims)}I", *dims) + struct.pack("<I", ds.num_classes)
    body = (head + np.ascontiguousarray(ds.features, dtype="<f4").tobytes()
            + np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != PRDS_MAGIC:
        raise DatasetMagicError(f"{path}: not a PRDS file")
    fixed = struct.calcsize("<4sHIB")
    if len(data) < fixed:
        raise DatasetSizeError(f"{path}: truncated header")
    _, version, n, ndim = struct.unpack_from("<4sHIB", data)
    if version != PRDS_VERSION:
        raise DatasetVersionError(f"{path}: unsupported PRDS version {version}")
    off = fixed
    if len(data) < off + 4 * ndim + 4:
        raise DatasetSizeError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    (num_classes,) = struct.unpack_from("<I", data, off)
    off += 4
    per = math.prod(dims)
    expected = off + 4 * n * per + 2 * n + 4
    if len(data) != expected:
        raise DatasetSizeError(f"{path}: expected {expected} bytes, found {len(data)}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if crc != zlib.crc32(data[:-4]):
        raise DatasetChecksumError(f"{path}: CRC-32 mismatch")
    feats = np.frombuffer(data, dtype="<f4", count=n * per, offset=off).astype(np.float64)
    labels = np.frombuffer(data, dtype="<u2", count=n, offset=off + 4 * n * per).astype(np.int64)
    return Dataset(feats.reshape((n, *dims)), labels, num_classes)
