"""Synthetic classification corpora and Dirichlet label-skew sharding."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_REDRAWS = 100


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    beta: float
    seed: int
    min_shard: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError(f"n_clients must be >= 1, got {self.n_clients}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.min_shard < 0:
            raise ValueError(f"min_shard must be >= 0, got {self.min_shard}")


@dataclass(frozen=True)
class LabeledDataset:
    sequences: np.ndarray  # (n, seq_len) int64 token ids
    labels: np.ndarray  # (n,) int64 class indices
    class_count: int

    def __post_init__(self):
        if self.sequences.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("sequences must be (n, seq) and labels (n,)")
        if len(self.sequences) != len(self.labels):
            raise ValueError("sequences and labels disagree on length")
        if len(self.labels) == 0:
            raise ValueError("dataset must be non-empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(self.sequences[idx], self.labels[idx], self.class_count)

    def label_histogram(self) -> np.ndarray:
        counts = np.bincount(self.labels, minlength=self.class_count)
        return counts / counts.sum()


def make_synthetic_task(
    vocab: int,
    classes: int,
    seq_len: int,
    size: int,
    seed: int,
    separation: float = 0.5,
) -> LabeledDataset:
    """Class-conditional token sequences a tiny transformer can learn.

    Each class owns a contiguous vocabulary block; every token comes from
    the class block with probability `separation`, otherwise uniformly from
    the whole vocabulary. separation=0 collapses all classes to noise.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if size < classes:
        raise ValueError(f"size {size} cannot cover {classes} classes")
    if vocab < classes:
        raise ValueError(f"vocab {vocab} smaller than class count {classes}")
    if not 0.0 <= separation <= 1.0:
        raise ValueError(f"separation must be in [0, 1], got {separation}")
    rng = np.random.default_rng(seed)
    labels = np.arange(size, dtype=np.int64) % classes
    block = vocab // classes
    lo = labels * block
    width = np.where(labels == classes - 1, vocab - lo, block)  # last block absorbs remainder
    from_block = rng.random((size, seq_len)) < separation
    uniform = rng.integers(0, vocab, size=(size, seq_len))
    in_block = lo[:, None] + rng.integers(0, 2**31, size=(size, seq_len)) % width[:, None]
    sequences = np.where(from_block, in_block, uniform).astype(np.int64)
    order = rng.permutation(size)
    return LabeledDataset(sequences[order], labels[order], classes)


def train_test_split(data: LabeledDataset, test_fraction: float, seed: int):
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_test = max(1, int(round(len(data) * test_fraction)))
    return data.subset(order[n_test:]), data.subset(order[:n_test])


def dirichlet_indices(labels: np.ndarray, class_count: int, spec: PartitionSpec) -> list[np.ndarray]:
    """Per-client example indices: for each class, client proportions ~ Dirichlet(beta).

    Shards are disjoint and cover every index. Draws violating min_shard are
    retried up to MAX_REDRAWS times with fresh proportions.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if spec.n_clients * spec.min_shard > n:
        raise ValueError(
            f"min_shard {spec.min_shard} infeasible for {spec.n_clients} clients on {n} examples"
        )
    rng = np.random.default_rng(spec.seed)
    for _ in range(MAX_REDRAWS):
        parts: list[list[np.ndarray]] = [[] for _ in range(spec.n_clients)]
        for c in range(class_count):
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            if len(idx) == 0:
                continue
            proportions = rng.dirichlet([spec.beta] * spec.n_clients)
            cuts = (np.cumsum(proportions)[:-1] * len(idx)).astype(int)
            for client, chunk in enumerate(np.split(idx, cuts)):
                parts[client].append(chunk)
        shards = [
            np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts
        ]
        if min(len(s) for s in shards) >= spec.min_shard:
            return shards
    raise ValueError(
        f"could not satisfy min_shard {spec.min_shard} within {MAX_REDRAWS} redraws (beta={spec.beta})"
    )


def dirichlet_partition(data: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    return [data.subset(idx) for idx in dirichlet_indices(data.labels, data.class_count, spec)]


def export_shard_manifest(path, shard_indices: list[np.ndarray]) -> None:
    manifest = {str(client): idx.tolist() for client, idx in enumerate(shard_indices)}
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=0) + "\n")


def load_shard_manifest(path) -> list[np.ndarray]:
    manifest = json.loads(Path(path).read_text())
    return [np.asarray(manifest[str(i)], dtype=np.int64) for i in range(len(manifest))]
